// Thin typed client over the promptseg HTTP API.

export interface OrganInfo {
  id: number;
  name: string;
}

export interface ModelInfo {
  classes: OrganInfo[];
  alpha: number;
  beta: number;
  checkpoint_hash: string;
  refine_checkpoint_hash: string;
  palette: Record<string, string>;
}

export interface VolumeInfo {
  id: string;
  dims: [number, number, number];
  spacing: [number, number, number];
  has_labels: boolean;
}

export interface RelationInfo {
  anchor: number;
  target: number;
  anchor_name: string;
  target_name: string;
}

export interface ParseResponse {
  presence: number[];
  mentioned: OrganInfo[];
  relations: RelationInfo[];
  fallback_visual_only: boolean;
}

export interface SegmentResponse {
  mask_id: string;
  voxel_counts: Record<string, number>;
  alpha_bias: number[];
  presence: number[];
  relations_used: RelationInfo[];
  skipped_relations: RelationInfo[];
  fallback_visual_only: boolean;
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class Client {
  constructor(
    private base: string = "",
    private fetchImpl: FetchLike = (u, i) => fetch(u, i),
  ) {}

  private async json<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await this.fetchImpl(this.base + path, init);
    if (!res.ok) {
      let detail = res.statusText;
      try {
        const body = await res.json();
        if (body && body.detail) detail = String(body.detail);
      } catch {
        /* non-JSON error body */
      }
      throw new ApiError(res.status, detail);
    }
    return (await res.json()) as T;
  }

  model(): Promise<ModelInfo> {
    return this.json<ModelInfo>("/api/model");
  }

  volumes(): Promise<VolumeInfo[]> {
    return this.json<VolumeInfo[]>("/api/volumes");
  }

  parse(prompt: string): Promise<ParseResponse> {
    return this.json<ParseResponse>("/api/parse", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ prompt }),
    });
  }

  segment(volumeId: string, prompt: string, restrict = false): Promise<SegmentResponse> {
    return this.json<SegmentResponse>("/api/segment", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ volume_id: volumeId, prompt, restrict }),
    });
  }

  volumeSliceUrl(volumeId: string, axis: string, index: number): string {
    return `${this.base}/api/volumes/${volumeId}/slice?axis=${axis}&index=${index}`;
  }

  maskSliceUrl(maskId: string, axis: string, index: number): string {
    return `${this.base}/api/masks/${maskId}/slice?axis=${axis}&index=${index}`;
  }
}
