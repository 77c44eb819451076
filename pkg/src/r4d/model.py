"""The reference-based distance model.

Per target, every selected reference yields a pair embedding. An attention
subnetwork scores the pairs after two rounds of global-local fusion (per-pair
MLP, average pool over the target's pairs, concatenate the pooled vector back
onto each pair); softmax-normalized scores weight the original pair
embeddings into one fused vector. The absolute head maps the fused vector to
meters, and a shared relative head predicts ``d_target - d_reference`` for
every pair as auxiliary supervision.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .diffcore import (
    MLPSpec,
    PreconditionError,
    Segments,
    Tensor,
    broadcast_segments,
    concat,
    init_mlp,
    load_params,
    mlp_forward,
    place_rows,
    save_params,
    segment_mean,
    segment_softmax,
    segment_sum,
    take_rows,
)
from .features import FeatureEncoders, PackedPairs, Toggles
from .records import Dataset

MODES = ("full", "no_attention", "relative_only")
INFERENCE_FLOOR_M = 1.0


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    attn_hidden: int = 64
    head_hidden: int = 64
    head_layers: int = 2
    output_scale_m: float = 50.0
    max_distance_m: float = 300.0
    toggles: Toggles = field(default_factory=Toggles)
    mode: str = "full"
    relative_choice: str = "nearest"  # or "random"
    relative_choice_seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.relative_choice not in ("nearest", "random"):
            raise ValueError(f"unknown relative_choice {self.relative_choice!r}")

    @property
    def encoders(self):
        return FeatureEncoders(self.embed_dim)

    @property
    def pair_dim(self):
        return 4 * self.embed_dim

    @property
    def attn_round1(self):
        return MLPSpec((self.attn_hidden,), use_layer_norm=True)

    @property
    def attn_round2(self):
        return MLPSpec((self.attn_hidden,), use_layer_norm=True)

    @property
    def attn_score(self):
        return MLPSpec((1,), activate_last=False)

    @property
    def head_spec(self):
        return MLPSpec((self.head_hidden,) * (self.head_layers - 1) + (1,), activate_last=False)

    def to_meta(self):
        d = {k: getattr(self, k) for k in ("embed_dim", "attn_hidden", "head_hidden", "head_layers",
                                           "output_scale_m", "max_distance_m", "mode",
                                           "relative_choice", "relative_choice_seed")}
        d["toggles"] = self.toggles.label()
        return d

    @classmethod
    def from_meta(cls, meta):
        meta = dict(meta)
        meta["toggles"] = Toggles.from_string(meta["toggles"]) if meta["toggles"] != "none" else Toggles(False, False, False, False)
        return cls(**meta)


@dataclass
class AttentionOutput:
    weights: np.ndarray
    fused: np.ndarray


@dataclass
class DistancePrediction:
    absolute_m: float
    per_pair_relative_m: list
    attention: list  # weights aligned with reference_ids
    reference_ids: list


@dataclass
class BatchOutput:
    absolute: Tensor  # [T] meters, unclamped
    relative: Tensor  # [P] meters
    weights: np.ndarray  # [P]
    fused: Tensor  # [T, 4E]
    pair_embeddings: Tensor  # [P, 4E]
    pair_local_target: np.ndarray  # [P] index into the batch's targets
    dr: np.ndarray  # [P] reference distances used


class R4DModel:
    def __init__(self, config=None, params=None, seed=0):
        self.config = config or ModelConfig()
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        self.params = params

    def _init_params(self, rng):
        cfg = self.config
        params = cfg.encoders.init_params(rng)
        init_mlp(cfg.attn_round1, cfg.pair_dim, rng, "attn1", params)
        init_mlp(cfg.attn_round2, 2 * cfg.attn_hidden, rng, "attn2", params)
        init_mlp(cfg.attn_score, 2 * cfg.attn_hidden, rng, "attn_score", params)
        init_mlp(cfg.head_spec, cfg.pair_dim, rng, "abs", params)
        init_mlp(cfg.head_spec, cfg.pair_dim, rng, "rel", params)
        return params

    # -- building blocks ----------------------------------------------------

    def set_output_offsets(self, absolute_m, relative_m):
        """Start both heads at given constant outputs (e.g. training-label means)."""
        last = len(self.config.head_spec.layer_widths) - 1
        scale = self.config.output_scale_m
        self.params[f"abs.{last}.b"].data[:] = absolute_m / scale
        self.params[f"rel.{last}.b"].data[:] = relative_m / scale

    def attention_weights(self, pair_emb, segments):
        """Normalized per-pair importance from two global-local fusion rounds."""
        cfg = self.config
        h = mlp_forward(cfg.attn_round1, self.params, pair_emb, "attn1")
        h = concat([h, broadcast_segments(segment_mean(h, segments), segments)], axis=1)
        h = mlp_forward(cfg.attn_round2, self.params, h, "attn2")
        h = concat([h, broadcast_segments(segment_mean(h, segments), segments)], axis=1)
        scores = mlp_forward(cfg.attn_score, self.params, h, "attn_score").reshape(-1)
        return segment_softmax(scores, segments)

    def aggregate(self, pair_emb, segments, mode=None):
        """``(weights, fused)`` per group; ``no_attention`` uses the plain mean."""
        mode = mode or self.config.mode
        if mode == "no_attention":
            weights = Tensor(1.0 / segments.counts[segments.group_of])
            return weights, segment_mean(pair_emb, segments)
        weights = self.attention_weights(pair_emb, segments)
        fused = segment_sum(weights.reshape(-1, 1) * pair_emb, segments)
        return weights, fused

    def absolute_head(self, fused):
        raw = mlp_forward(self.config.head_spec, self.params, fused, "abs")
        return raw.reshape(-1) * self.config.output_scale_m

    def relative_head(self, pair_emb):
        raw = mlp_forward(self.config.head_spec, self.params, pair_emb, "rel")
        return raw.reshape(-1) * self.config.output_scale_m

    # -- batched forward -------------------------------------------------------

    def forward_batch(self, packed, targets, pairs, dr=None, mode=None, chosen_pairs=None):
        """Forward pass over ``targets`` (and their ``pairs``) of a :class:`PackedPairs`.

        ``dr`` overrides the reference distances (augmentation); ``chosen_pairs``
        gives, per target, the batch-local pair index used by ``relative_only``.
        """
        cfg = self.config
        mode = mode or cfg.mode
        enc = cfg.encoders
        tg = cfg.toggles
        n_t = targets.size
        counts = packed.target_pstart[targets + 1] - packed.target_pstart[targets]
        local = np.repeat(np.arange(n_t), counts)
        dr = packed.pair_dr[pairs] if dr is None else np.asarray(dr, dtype=np.float64)
        tgt_app = packed.target_app[targets]

        with_refs = np.flatnonzero(counts > 0)
        without = np.flatnonzero(counts == 0)
        if mode == "relative_only" and without.size:
            raise PreconditionError("relative_only mode requires at least one reference per target")

        weights = np.zeros(pairs.size)
        rel = Tensor(np.zeros(0))
        pair_emb = Tensor(np.zeros((0, cfg.pair_dim)))
        pieces = []
        if pairs.size:
            geo = np.concatenate([packed.pair_geo[pairs], (dr / cfg.max_distance_m)[:, None]], axis=1)
            pair_emb = enc.assemble(
                self.params, tg, tgt_app[local], packed.pair_app[pairs], packed.pair_union[pairs], geo
            )
            group = np.searchsorted(with_refs, local)
            segments = Segments(group, with_refs.size)
            w, fused_with = self.aggregate(pair_emb, segments, mode)
            weights = w.data.copy()
            pieces.append(place_rows(fused_with, with_refs, n_t))
            rel = self.relative_head(pair_emb)
        if without.size:
            pieces.append(place_rows(enc.fallback(self.params, tg, tgt_app[without]), without, n_t))
        fused = pieces[0]
        for p in pieces[1:]:
            fused = fused + p

        if mode == "relative_only":
            if chosen_pairs is None:
                chosen_pairs = self.choose_pairs(packed, targets, pairs)
            absolute = take_rows(rel, chosen_pairs) + dr[chosen_pairs]
        else:
            absolute = self.absolute_head(fused)
        return BatchOutput(absolute, rel, weights, fused, pair_emb, local, dr)

    def choose_pairs(self, packed, targets, pairs):
        """Batch-local pair index of the single reference used per target."""
        counts = packed.target_pstart[targets + 1] - packed.target_pstart[targets]
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        if self.config.relative_choice == "random":
            rng = np.random.default_rng(self.config.relative_choice_seed)
            return (starts + (rng.random(targets.size) * counts).astype(np.intp)).astype(np.intp)
        chosen = np.empty(targets.size, dtype=np.intp)
        for k, t in enumerate(targets):
            block = pairs[starts[k]:starts[k] + counts[k]]
            hits = np.flatnonzero(packed.pair_ref[block] == packed.target_nearest_ref[t])
            chosen[k] = starts[k] + hits[0]
        return chosen

    # -- inference -------------------------------------------------------------

    def predict_packed(self, packed, batch_targets=4096, mode=None):
        """Clamped absolute predictions and attention weights for every target."""
        preds = np.empty(packed.n_targets)
        weights = np.empty(packed.n_pairs)
        rel = np.empty(packed.n_pairs)
        for start in range(0, packed.n_targets, batch_targets):
            targets, pairs = packed.batch_targets(np.arange(start, min(start + batch_targets, packed.n_targets)))
            out = self.forward_batch(packed, targets, pairs, mode=mode)
            preds[targets] = np.maximum(out.absolute.data, INFERENCE_FLOOR_M)
            weights[pairs] = out.weights
            rel[pairs] = out.relative.data
        return preds, weights, rel

    def predict_dataset(self, dataset, max_refs, mode=None):
        packed = PackedPairs(dataset, max_refs, self.config.max_distance_m)
        return packed, self.predict_packed(packed, mode=mode)

    # -- persistence -------------------------------------------------------------

    def save(self, path, extra_meta=None):
        meta = {"model": self.config.to_meta()}
        meta.update(extra_meta or {})
        save_params(path, self.params, meta)

    @classmethod
    def load(cls, path):
        arrays, meta = load_params(path)
        config = ModelConfig.from_meta(meta["model"])
        model = cls(config)
        for name, arr in arrays.items():
            if name not in model.params or model.params[name].shape != arr.shape:
                raise ValueError(f"checkpoint parameter {name} does not fit the model")
            model.params[name].data[...] = arr
        return model, meta

    def copy_params(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_arrays(self, arrays):
        for k, v in arrays.items():
            self.params[k].data[...] = v


# -- single-target API ----------------------------------------------------------


def attention_aggregate(pair_embeddings, model):
    """Attention over one target's pair embeddings (``[k, 4E]`` array or list)."""
    rows = [getattr(p, "data", p) for p in pair_embeddings]
    if len(rows) == 0:
        raise PreconditionError("no pairs to aggregate; use the zero-reference fallback")
    emb = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    segments = Segments(np.zeros(emb.shape[0], dtype=np.intp), 1)
    w, fused = model.aggregate(Tensor(emb), segments, mode="full")
    return AttentionOutput(w.data.copy(), fused.data[0].copy())


def absolute_head(fused, model, inference=True):
    out = model.absolute_head(Tensor(np.atleast_2d(fused))).data[0]
    return max(out, INFERENCE_FLOOR_M) if inference else out


def relative_head(pair_embedding, model):
    return float(model.relative_head(Tensor(np.atleast_2d(pair_embedding))).data[0])


def forward(scene, target, model, mode=None, max_refs=50):
    """Prediction for one target of one scene."""
    packed = PackedPairs(Dataset([scene]), max_refs, model.config.max_distance_m)
    t = int(np.flatnonzero(packed.target_object == target.object_id)[0])
    targets, pairs = packed.batch_targets([t])
    out = model.forward_batch(packed, targets, pairs, mode=mode)
    return DistancePrediction(
        absolute_m=max(float(out.absolute.data[0]), INFERENCE_FLOOR_M),
        per_pair_relative_m=[float(v) for v in out.relative.data],
        attention=[float(v) for v in out.weights],
        reference_ids=[int(r) for r in packed.pair_ref[pairs]],
    )


def with_mode(config, mode):
    return replace(config, mode=mode)
