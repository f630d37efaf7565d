"""End-to-end pipelines: fusion training, prompt-conditioned inference, and
directory-level evaluation.

Training updates only the fusion parameters; the logit source and the text
embeddings are frozen data.  Everything is driven by one seeded generator in
a fixed order, so a (seed, config, data) triple fully determines every
artifact byte.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import load_corpus
from .embedding import embed_hashed
from .errors import CorpusMisaligned, MissingPair, ShapeMismatch
from .fusion import (
    FusionCheckpoint,
    FusionParams,
    FusionTargets,
    class_bias,
    fuse_logits,
    fusion_backward,
    fusion_config_hash,
    init_fusion,
)
from .grids import LabelMap, LogitTensor, Volume, argmax_channels, softmax_channels
from .losses import LossBreakdown, LossConfig
from .metrics import MetricsReport, OrganMetrics, evaluate_labelmaps
from .optim import AdamWState, ScheduleConfig, adamw_step, cosine_lr
from .phantom import LogitOracleConfig, PatchSamplerConfig, oracle_logits, sample_patches
from .priors import BinaryMask, RelationPriorConfig, relation_prior_fields
from .prompts import Lexicon, ParsedPrompt, parse_prompt
from .refine import RefineParams, refine_forward
from .volio import load_labelmap

LOG_HEADER = "# epoch\titer\tlr\t" + "\t".join(LossBreakdown.FIELDS)


@dataclass
class TrainRunConfig:
    epochs: int = 20
    iterations_per_epoch: int = 100
    lr: float = 2e-3
    weight_decay: float = 1e-4
    lambda_text: float = 0.2
    lambda_rel: float = 0.2
    seed: int = 0
    patch_dims: tuple[int, int, int] = (96, 96, 96)
    pos_fraction: float = 0.5
    d_max: float = 8.0
    restrict_to_prompt: bool = False

    def loss_config(self) -> LossConfig:
        return LossConfig(lambda_text=self.lambda_text, lambda_rel=self.lambda_rel)


@dataclass
class OracleLogitSource:
    """Frozen visual-logit provider backed by the phantom oracle.

    With suppress_prompted on, each call hides exactly the classes the
    paired prompt mentions, so text conditioning is the only route back.
    """

    cfg: LogitOracleConfig
    num_classes: int
    suppress_prompted: bool = False

    def __call__(
        self,
        labels: LabelMap,
        parsed: ParsedPrompt | None,
        rng: np.random.Generator,
    ) -> LogitTensor:
        cfg = self.cfg
        if self.suppress_prompted and parsed is not None:
            cfg = replace(cfg, suppressed_classes=frozenset(parsed.mentioned()))
        return oracle_logits(labels, cfg, self.num_classes, rng)


def _gt_relation_fields(
    labels: LabelMap, relations, prior_cfg: RelationPriorConfig
):
    anchors = {a: BinaryMask(labels.data == a, labels.spacing) for a, _ in relations}
    return relation_prior_fields(list(relations), anchors, prior_cfg)


def _prior_from_fields(rel_fields, num_classes, dims, spacing) -> LogitTensor | None:
    if not rel_fields:
        return None
    data = np.zeros((num_classes,) + tuple(dims), dtype=np.float64)
    for _, target, fld in rel_fields:
        np.maximum(data[target], fld, out=data[target])
    return LogitTensor(data, spacing)


def _format_log_line(epoch: int, it: int, lr: float, bd: LossBreakdown) -> str:
    values = "\t".join(repr(v) for v in bd.as_tuple())
    return f"{epoch}\t{it}\t{lr!r}\t{values}"


def train_fusion(
    volumes: list[tuple[Volume, LabelMap]],
    logit_source,
    corpus: list[tuple[str, ParsedPrompt]],
    cfg: TrainRunConfig,
    lex: Lexicon,
    embed_provider=embed_hashed,
    init_params: FusionParams | None = None,
) -> tuple[FusionCheckpoint, list[LossBreakdown], list[str]]:
    """Fusion training loop: per iteration sample a patch, pair it with an
    aligned prompt, fuse, and update the fusion parameters only.

    Prompt i of the corpus is bound to volume ``i % len(volumes)``; a prompt
    is sampled among those of the patch's volume whose organs all appear in
    the patch (falling back to the whole volume's prompts).
    """
    if not volumes or not corpus:
        raise CorpusMisaligned("need at least one volume and one prompt")
    num_classes = len(corpus[0][1].presence)
    prompts_of: dict[int, list[tuple[str, ParsedPrompt]]] = {}
    for i, (text, parsed) in enumerate(corpus):
        vol_idx = i % len(volumes)
        present = volumes[vol_idx][1].classes_present()
        if not set(parsed.mentioned()) <= present:
            raise CorpusMisaligned(
                f"prompt {i} mentions organs absent from volume {vol_idx}: {text!r}"
            )
        prompts_of.setdefault(vol_idx, []).append((text, parsed))

    params = init_params.copy() if init_params else init_fusion(num_classes, cfg.seed)
    if params.channels != num_classes:
        raise ShapeMismatch(
            f"fusion params have C={params.channels}, corpus has C={num_classes}"
        )
    pdict = params.as_dict()
    state = AdamWState()
    loss_cfg = cfg.loss_config()
    prior_cfg = RelationPriorConfig(d_max=cfg.d_max)
    schedule = ScheduleConfig(cfg.lr, max(cfg.epochs, 1))
    rng = np.random.default_rng(cfg.seed)
    embed_cache: dict[str, np.ndarray] = {}

    history: list[LossBreakdown] = []
    log_lines = [LOG_HEADER]
    for epoch in range(cfg.epochs):
        lr_epoch = cosine_lr(epoch, schedule)
        for it in range(cfg.iterations_per_epoch):
            vol_idx = int(rng.integers(len(volumes)))
            volume, labels = volumes[vol_idx]
            sampler = PatchSamplerConfig(
                patch_dims=cfg.patch_dims,
                pos_fraction=cfg.pos_fraction,
                samples_per_volume=1,
            )
            _, lab_patch, _ = sample_patches(volume, labels, sampler, rng=rng)[0]

            patch_classes = lab_patch.classes_present()
            pool = prompts_of.get(vol_idx, [])
            if not pool:
                raise CorpusMisaligned(f"volume {vol_idx} has no bound prompts")
            candidates = [
                r for r in pool if set(r[1].mentioned()) <= patch_classes
            ] or pool
            text, parsed = candidates[int(rng.integers(len(candidates)))]

            if text not in embed_cache:
                embed_cache[text] = embed_provider(text)
            emb = embed_cache[text]

            visual = logit_source(lab_patch, parsed, rng)
            rel_fields, _ = _gt_relation_fields(lab_patch, parsed.relations, prior_cfg)
            prior = _prior_from_fields(
                rel_fields, num_classes, lab_patch.dims, lab_patch.spacing
            )
            targets = FusionTargets(
                lab_patch, np.asarray(parsed.presence, dtype=np.float64), rel_fields
            )
            bd, grads = fusion_backward(
                emb, visual, prior, targets, loss_cfg, FusionParams.from_dict(pdict)
            )
            adamw_step(pdict, grads.as_dict(), state, lr_epoch, cfg.weight_decay)
            history.append(bd)
            log_lines.append(_format_log_line(epoch, it, lr_epoch, bd))

    final = FusionParams.from_dict({k: np.array(v) for k, v in pdict.items()})
    ckpt = FusionCheckpoint(
        final,
        cfg.epochs,
        state,
        fusion_config_hash(final.embed_dim, final.hidden_dim, final.channels),
    )
    return ckpt, history, log_lines


@dataclass
class InferenceConfig:
    restrict_to_prompt: bool = False
    d_max: float = 8.0


@dataclass
class InferenceResult:
    mask: LabelMap
    presence_used: tuple[int, ...]
    relations_used: tuple[tuple[int, int], ...]
    alpha_bias: np.ndarray
    fallback_visual_only: bool
    skipped_relations: tuple[tuple[int, int], ...] = ()


def infer(
    visual: LogitTensor,
    prompt: str,
    params: FusionParams,
    lex: Lexicon,
    cfg: InferenceConfig | None = None,
    refine_params: RefineParams | None = None,
    embed_provider=embed_hashed,
) -> InferenceResult:
    """Prompt-conditioned inference on precomputed visual logits.

    Zero-presence prompts skip the bias entirely and fall back to the visual
    prediction; relation anchors come from the visual argmax.  With
    restrict_to_prompt on, foreground classes the prompt does not mention are
    mapped to background after the argmax.
    """
    cfg = cfg or InferenceConfig()
    if params.channels != visual.channels:
        raise ShapeMismatch(
            f"fusion params C={params.channels} vs logits C={visual.channels}"
        )
    if refine_params is not None:
        visual, _ = refine_forward(visual, refine_params, mode="eval")

    parsed = parse_prompt(prompt, lex)
    mentioned = parsed.mentioned()
    skipped: tuple[tuple[int, int], ...] = ()
    if not mentioned:
        fused = visual
        alpha_bias = np.zeros(visual.channels)
        fallback = True
    else:
        bias = class_bias(params, embed_provider(prompt))
        prior = None
        if parsed.relations:
            visual_pred = argmax_channels(softmax_channels(visual))
            anchors = {
                a: BinaryMask(visual_pred.data == a, visual.spacing)
                for a, _ in parsed.relations
            }
            rel_fields, skipped_list = relation_prior_fields(
                list(parsed.relations), anchors, RelationPriorConfig(d_max=cfg.d_max)
            )
            skipped = tuple(skipped_list)
            prior = _prior_from_fields(
                rel_fields, visual.channels, visual.dims, visual.spacing
            )
        fused = fuse_logits(visual, bias, params.alpha, params.beta, prior)
        alpha_bias = params.alpha * bias
        fallback = False

    mask = argmax_channels(softmax_channels(fused))
    if cfg.restrict_to_prompt:
        keep = np.zeros(visual.channels, dtype=bool)
        keep[0] = True
        for c in mentioned:
            keep[c] = True
        data = mask.data.copy()
        data[~keep[data]] = 0
        mask = LabelMap(data, mask.spacing)

    return InferenceResult(
        mask=mask,
        presence_used=parsed.presence,
        relations_used=parsed.relations,
        alpha_bias=alpha_bias,
        fallback_visual_only=fallback,
        skipped_relations=skipped,
    )


def windowed_logits(
    labels: LabelMap,
    logit_source,
    parsed: ParsedPrompt | None,
    patch_dims: tuple[int, int, int],
    overlap: float = 0.25,
    seed: int = 0,
) -> LogitTensor:
    """Sliding-window visual logits from a label-backed source; each window
    draws from its own offset-derived stream so runs are reproducible."""
    from .grids import sliding_window_apply

    def fn(patch_grid, offset):
        rng = np.random.default_rng(np.random.SeedSequence((seed,) + tuple(offset)))
        return logit_source(patch_grid, parsed, rng)

    return sliding_window_apply(labels, patch_dims, overlap, fn)


def evaluate_run(
    pred_dir: str, gt_dir: str, num_classes: int
) -> tuple[dict[str, MetricsReport], MetricsReport]:
    """Evaluate matching ``*.vol`` label files and aggregate across volumes.

    The aggregate per-organ value is the mean over volumes where that organ
    metric is defined; aggregate averages follow the same exclusion rule.
    """
    import math

    names = sorted(f for f in os.listdir(gt_dir) if f.endswith(".vol"))
    if not names:
        raise MissingPair(f"no .vol label files in {gt_dir}")
    per_volume: dict[str, MetricsReport] = {}
    for name in names:
        pred_path = os.path.join(pred_dir, name)
        if not os.path.exists(pred_path):
            raise MissingPair(f"prediction missing for {name}")
        pred = load_labelmap(pred_path)
        gt = load_labelmap(os.path.join(gt_dir, name))
        per_volume[name] = evaluate_labelmaps(pred, gt, num_classes)

    from dataclasses import fields as dc_fields

    organ_ids = sorted(next(iter(per_volume.values())).per_organ)
    agg_per_organ: dict[int, OrganMetrics] = {}
    for cid in organ_ids:
        agg = OrganMetrics()
        for f in dc_fields(OrganMetrics):
            vals = [
                getattr(r.per_organ[cid], f.name)
                for r in per_volume.values()
                if not math.isnan(getattr(r.per_organ[cid], f.name))
            ]
            setattr(agg, f.name, float(np.mean(vals)) if vals else math.nan)
        agg_per_organ[cid] = agg
    averages = OrganMetrics()
    undefined: dict[str, int] = {}
    for f in dc_fields(OrganMetrics):
        vals = [
            getattr(m, f.name)
            for m in agg_per_organ.values()
            if not math.isnan(getattr(m, f.name))
        ]
        undefined[f.name] = len(agg_per_organ) - len(vals)
        setattr(averages, f.name, float(np.mean(vals)) if vals else math.nan)
    aggregate = MetricsReport(agg_per_organ, averages, undefined)
    return per_volume, aggregate
