"""In-memory service state: loaded model, volume registry, mask store.

Model state is immutable after startup.  The mask store is append-only with
atomic id allocation; identical (volume, prompt, restrict) requests reuse the
stored mask so responses are byte-identical across repeats.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass, field

from ..errors import BadCheckpoint
from ..fusion import FusionParams, checkpoint_file_hash, load_checkpoint
from ..grids import LabelMap, LogitTensor, Volume
from ..pipelines import InferenceConfig, InferenceResult, infer
from ..prompts import Lexicon, default_lexicon, load_lexicon
from ..refine import RefineParams, load_refine_checkpoint
from ..volio import load_labelmap, load_logits, load_volume


@dataclass
class VolumeEntry:
    volume_path: str
    logits_path: str | None = None
    labels_path: str | None = None
    _volume: Volume | None = None
    _logits: LogitTensor | None = None

    def volume(self) -> Volume:
        if self._volume is None:
            self._volume = load_volume(self.volume_path)
        return self._volume

    def logits(self) -> LogitTensor:
        if self.logits_path is None:
            raise BadCheckpoint(f"no visual logits registered for {self.volume_path}")
        if self._logits is None:
            self._logits = load_logits(self.logits_path)
        return self._logits


@dataclass
class ServiceState:
    fusion: FusionParams
    lexicon: Lexicon
    checkpoint_hash: str = ""
    refine: RefineParams | None = None
    refine_hash: str = ""
    volumes: dict[str, VolumeEntry] = field(default_factory=dict)
    masks: dict[str, LabelMap] = field(default_factory=dict)
    _mask_keys: dict[tuple[str, str, bool], str] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock)

    def register_volume(self, vol_id: str, entry: VolumeEntry) -> None:
        self.volumes[vol_id] = entry

    def segment(self, volume_id: str, prompt: str, restrict: bool) -> tuple[str, InferenceResult]:
        """Run (or reuse) inference; returns (mask_id, result)."""
        entry = self.volumes[volume_id]
        key = (volume_id, prompt, restrict)
        result = infer(
            entry.logits(),
            prompt,
            self.fusion,
            self.lexicon,
            InferenceConfig(restrict_to_prompt=restrict),
            refine_params=self.refine,
        )
        with self._lock:
            mask_id = self._mask_keys.get(key)
            if mask_id is None:
                mask_id = f"m{len(self.masks):05d}"
                self._mask_keys[key] = mask_id
                self.masks[mask_id] = result.mask
        return mask_id, result


def scan_volume_dir(directory: str) -> dict[str, VolumeEntry]:
    """Register ``<id>.vol`` volumes with optional ``<id>_logits.vol`` and
    ``<id>_labels.vol`` companions."""
    entries: dict[str, VolumeEntry] = {}
    for name in sorted(os.listdir(directory)):
        if not name.endswith(".vol") or name.endswith(".vol.hdr"):
            continue
        stem = name[: -len(".vol")]
        if stem.endswith("_logits") or stem.endswith("_labels"):
            continue
        base = os.path.join(directory, stem)
        entries[stem] = VolumeEntry(
            volume_path=base + ".vol",
            logits_path=p if os.path.exists(p := base + "_logits.vol") else None,
            labels_path=p if os.path.exists(p := base + "_labels.vol") else None,
        )
    return entries


def build_state(
    fusion_ckpt: str,
    data_dir: str | None = None,
    refine_ckpt: str | None = None,
    lexicon_path: str | None = None,
) -> ServiceState:
    ckpt = load_checkpoint(fusion_ckpt)
    lex = load_lexicon(lexicon_path) if lexicon_path else default_lexicon()
    state = ServiceState(
        fusion=ckpt.params,
        lexicon=lex,
        checkpoint_hash=checkpoint_file_hash(fusion_ckpt),
    )
    if refine_ckpt:
        state.refine = load_refine_checkpoint(refine_ckpt).params
        state.refine_hash = checkpoint_file_hash(refine_ckpt)
    if data_dir:
        state.volumes = scan_volume_dir(data_dir)
    return state
