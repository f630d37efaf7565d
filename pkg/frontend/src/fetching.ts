// Per-layer fetch coalescing: while a request is in flight, newer requests
// for the same layer just replace the pending URL.  Rapid slice scrubbing
// therefore costs at most one in-flight fetch per layer, and the layer
// always ends up showing the most recently requested image.

export type Loader<T> = (url: string) => Promise<T>;

export class LayerFetcher<T> {
  private inFlight = false;
  private pendingUrl: string | null = null;
  private currentUrl: string | null = null;
  loads = 0; // instrumentation for tests

  constructor(
    private loader: Loader<T>,
    private apply: (value: T, url: string) => void,
  ) {}

  request(url: string): void {
    if (url === this.currentUrl && !this.inFlight) return; // already shown
    this.pendingUrl = url;
    if (!this.inFlight) void this.drain();
  }

  private async drain(): Promise<void> {
    this.inFlight = true;
    try {
      while (this.pendingUrl !== null) {
        const url = this.pendingUrl;
        this.pendingUrl = null;
        this.loads += 1;
        try {
          const value = await this.loader(url);
          // a newer request may have arrived; only the latest result sticks
          if (this.pendingUrl === null) {
            this.currentUrl = url;
            this.apply(value, url);
          }
        } catch {
          this.currentUrl = null; // retry-able on the next request
        }
      }
    } finally {
      this.inFlight = false;
    }
  }
}
