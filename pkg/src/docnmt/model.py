"""Attentional LSTM encoder-decoder with previous-sentence context.

Six variants share one interface.  The baseline translates sentences
independently.  Separated variants run an extra two-layer context LSTM
over the previous source or target sentence; shared variants reuse the
saved encoder or decoder states of the previous sentence instead, and
shared-mix sums the source- and target-side context attention vectors.
The output projection consumes [decoder state; current attention] for the
baseline and [decoder state; current attention; context attention] for
the context variants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T

VARIANTS = ("baseline", "separated-source", "separated-target",
            "shared-source", "shared-target", "shared-mix")
SOURCE_CONTEXT = frozenset({"separated-source", "shared-source", "shared-mix"})
TARGET_CONTEXT = frozenset({"separated-target", "shared-target", "shared-mix"})
SEPARATED = frozenset({"separated-source", "separated-target"})

INIT_RANGE = 0.08


@dataclass
class ModelConfig:
    variant: str
    emb_dim: int
    hidden_dim: int
    src_vocab_size: int
    trg_vocab_size: int
    layers: int = 2
    dropout: float = 0.2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant: {self.variant}")
        if self.hidden_dim % 2 != 0:
            raise ValueError("hidden_dim must be even (bidirectional halves)")
        if self.layers != 2:
            raise ValueError("only the two-layer architecture is supported")

    @property
    def uses_context(self) -> bool:
        return self.variant != "baseline"


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter order; checkpoints serialize in this order."""
    e, h = cfg.emb_dim, cfg.hidden_dim
    half = h // 2
    shapes: dict[str, tuple[int, ...]] = {
        "src_emb": (cfg.src_vocab_size, e),
        "trg_emb": (cfg.trg_vocab_size, e),
    }
    for layer, in_dim in ((1, e), (2, h)):
        for direction in ("fwd", "bwd"):
            stem = f"enc_l{layer}_{direction}"
            shapes[f"{stem}_wx"] = (in_dim, 4 * half)
            shapes[f"{stem}_wh"] = (half, 4 * half)
            shapes[f"{stem}_b"] = (4 * half,)
    for layer, in_dim in ((1, e), (2, h)):
        shapes[f"dec_l{layer}_wx"] = (in_dim, 4 * h)
        shapes[f"dec_l{layer}_wh"] = (h, 4 * h)
        shapes[f"dec_l{layer}_b"] = (4 * h,)
    blocks = 3 if cfg.uses_context else 2
    shapes["attn_out"] = (blocks * h, h)
    shapes["out_proj"] = (h, cfg.trg_vocab_size)
    if cfg.variant in SEPARATED:
        for layer, in_dim in ((1, e), (2, h)):
            shapes[f"ctx_l{layer}_wx"] = (in_dim, 4 * h)
            shapes[f"ctx_l{layer}_wh"] = (h, 4 * h)
            shapes[f"ctx_l{layer}_b"] = (4 * h,)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in parameter_shapes(cfg).values())


def _init_param(name: str, shape: tuple[int, ...], rng: np.random.Generator,
                dtype) -> T.Tensor:
    if name.endswith("_b"):
        data = np.zeros(shape)
        gates = shape[0] // 4
        data[gates:2 * gates] = 1.0  # forget-gate bias stabilizer
    else:
        data = rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape)
    return T.Tensor(data, requires_grad=True, dtype=dtype)


@dataclass
class EncoderStates:
    """Per-token encoder states plus the per-layer final carries."""

    states: T.Tensor                       # (B, M, H)
    mask: np.ndarray                       # (B, M)
    finals: list[tuple[T.Tensor, T.Tensor]]  # per layer (h, c), each (B, H)


@dataclass
class ContextCache:
    """Saved previous-sentence states consumed by context attention.

    Zero entries mean no previous sentence: context attention returns an
    exact zero vector.  shared-mix carries two entries (source, target).
    """

    entries: list[tuple[T.Tensor, np.ndarray]] = field(default_factory=list)

    @classmethod
    def empty(cls) -> "ContextCache":
        return cls(entries=[])


@dataclass
class StepResult:
    probs: T.Tensor            # (B, V)
    carry: list[tuple[T.Tensor, T.Tensor]]
    h_tilde: T.Tensor          # (B, H)
    h_top: T.Tensor            # (B, H) top-layer decoder state
    alpha: Optional[T.Tensor]  # (B, M) current-sentence attention
    betas: list[T.Tensor]      # context attention weights per cache entry


def context_attention(h: T.Tensor, cache: ContextCache
                      ) -> tuple[T.Tensor, list[T.Tensor]]:
    """Previous-sentence attention; empty cache yields an exact zero vector.

    With several entries (shared-mix) the per-entry vectors are summed.
    """
    if not cache.entries:
        return T.Tensor(np.zeros(h.shape, dtype=h.dtype)), []
    betas = []
    total = None
    for states, mask in cache.entries:
        mixed, weights = T.dot_attention(states, mask, h)
        betas.append(weights)
        total = mixed if total is None else T.add(total, mixed)
    return total, betas


class TranslationModel:
    """Parameter container plus the forward computations for one variant."""

    def __init__(self, cfg: ModelConfig, rng: Optional[np.random.Generator] = None,
                 dtype=np.float32,
                 params: Optional[dict[str, T.Tensor]] = None):
        self.cfg = cfg
        self.dtype = dtype
        shapes = parameter_shapes(cfg)
        if params is not None:
            for name, shape in shapes.items():
                if name not in params or params[name].shape != shape:
                    raise ValueError(f"parameter {name} missing or misshaped")
            self.params = {name: params[name] for name in shapes}
        else:
            if rng is None:
                raise ValueError("need an rng to initialize parameters")
            self.params = {name: _init_param(name, shape, rng, dtype)
                           for name, shape in shapes.items()}

    def param_list(self) -> list[T.Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- encoder ----------------------------------------------------------

    def _scan(self, emb: T.Tensor, mask: np.ndarray, stem: str, hidden: int,
              reverse: bool) -> tuple[list[T.Tensor], T.Tensor, T.Tensor]:
        """Run one LSTM direction over (B, M, In); padding carries state through."""
        b, m, _ = emb.shape
        w_x = self.params[f"{stem}_wx"]
        w_h = self.params[f"{stem}_wh"]
        bias = self.params[f"{stem}_b"]
        h = T.Tensor(np.zeros((b, hidden), dtype=self.dtype))
        c = T.Tensor(np.zeros((b, hidden), dtype=self.dtype))
        steps = range(m - 1, -1, -1) if reverse else range(m)
        outputs: list[Optional[T.Tensor]] = [None] * m
        for t in steps:
            x_t = T.select(emb, 1, t)
            m_t = mask[:, t:t + 1].astype(self.dtype)
            h, c = T.lstm_cell(x_t, h, c, w_x, w_h, bias, mask=m_t)
            outputs[t] = h
        return outputs, h, c

    def encode(self, src_ids: np.ndarray, src_mask: np.ndarray,
               training: bool = False,
               rng: Optional[np.random.Generator] = None) -> EncoderStates:
        cfg = self.cfg
        half = cfg.hidden_dim // 2
        b, m = src_ids.shape
        emb = T.embedding(self.params["src_emb"], src_ids)
        emb = self._dropout(emb, training, rng)
        layer_in = emb
        finals = []
        for layer in (1, 2):
            fwd, hf, cf = self._scan(layer_in, src_mask, f"enc_l{layer}_fwd",
                                     half, reverse=False)
            bwd, hb, cb = self._scan(layer_in, src_mask, f"enc_l{layer}_bwd",
                                     half, reverse=True)
            per_pos = [T.concat([fwd[t], bwd[t]], axis=-1) for t in range(m)]
            layer_out = T.stack(per_pos, axis=1)  # (B, M, H)
            finals.append((T.concat([hf, hb], axis=-1),
                           T.concat([cf, cb], axis=-1)))
            layer_in = self._dropout(layer_out, training, rng) if layer == 1 \
                else layer_out
        return EncoderStates(states=layer_in, mask=src_mask, finals=finals)

    def _dropout(self, x: T.Tensor, training: bool,
                 rng: Optional[np.random.Generator]) -> T.Tensor:
        if not training or self.cfg.dropout == 0.0:
            return x
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        return T.dropout(x, self.cfg.dropout, True, rng)

    # -- context ----------------------------------------------------------

    def _context_scan(self, ids: np.ndarray, mask: np.ndarray, emb_table: str,
                      training: bool, rng) -> T.Tensor:
        b, m = ids.shape
        emb = T.embedding(self.params[emb_table], ids)
        emb = self._dropout(emb, training, rng)
        layer_in = emb
        for layer in (1, 2):
            outs, _, _ = self._scan(layer_in, mask, f"ctx_l{layer}",
                                    self.cfg.hidden_dim, reverse=False)
            layer_out = T.stack(outs, axis=1)
            layer_in = self._dropout(layer_out, training, rng) if layer == 1 \
                else layer_out
        return layer_in

    def context_states(self,
                       prev_src_ids: Optional[np.ndarray] = None,
                       prev_src_mask: Optional[np.ndarray] = None,
                       prev_encoder: Optional[EncoderStates] = None,
                       prev_decoder_states: Optional[T.Tensor] = None,
                       prev_trg_ids: Optional[np.ndarray] = None,
                       prev_trg_mask: Optional[np.ndarray] = None,
                       training: bool = False,
                       rng: Optional[np.random.Generator] = None) -> ContextCache:
        """Build the previous-sentence cache for this variant.

        Call with no arguments for the first sentence of a document.
        Shared variants store detached copies of the saved states, so no
        gradient crosses the sentence boundary.
        """
        variant = self.cfg.variant
        no_prev = (prev_src_ids is None and prev_encoder is None
                   and prev_decoder_states is None and prev_trg_ids is None)
        if variant == "baseline" or no_prev:
            return ContextCache.empty()
        entries: list[tuple[T.Tensor, np.ndarray]] = []
        if variant in SOURCE_CONTEXT:
            if variant == "separated-source":
                if prev_src_ids is None or prev_src_mask is None:
                    raise ValueError("separated-source needs the previous source tokens")
                states = self._context_scan(prev_src_ids, prev_src_mask,
                                            "src_emb", training, rng)
                entries.append((states, prev_src_mask))
            else:
                if prev_encoder is None:
                    raise ValueError("shared source context needs the previous "
                                     "encoder states")
                entries.append((prev_encoder.states.detach(), prev_encoder.mask))
        if variant in TARGET_CONTEXT:
            if variant == "separated-target":
                if prev_trg_ids is None or prev_trg_mask is None:
                    raise ValueError("separated-target needs the previous target tokens")
                states = self._context_scan(prev_trg_ids, prev_trg_mask,
                                            "trg_emb", training, rng)
                entries.append((states, prev_trg_mask))
            else:
                if prev_decoder_states is None or prev_trg_mask is None:
                    raise ValueError("shared target context needs the previous "
                                     "decoder states")
                entries.append((prev_decoder_states.detach(), prev_trg_mask))
        return ContextCache(entries) if entries else ContextCache.empty()

    # -- decoder ----------------------------------------------------------

    def init_carry(self, enc: EncoderStates) -> list[tuple[T.Tensor, T.Tensor]]:
        """Decoder start state: the encoder's final per-layer states."""
        return [(h, c) for h, c in enc.finals]

    def _step(self, x: T.Tensor, carry, enc: EncoderStates, cache: ContextCache,
              training: bool, rng) -> StepResult:
        (h1, c1), (h2, c2) = carry
        h1, c1 = T.lstm_cell(x, h1, c1, self.params["dec_l1_wx"],
                             self.params["dec_l1_wh"], self.params["dec_l1_b"])
        mid = self._dropout(h1, training, rng)
        h2, c2 = T.lstm_cell(mid, h2, c2, self.params["dec_l2_wx"],
                             self.params["dec_l2_wh"], self.params["dec_l2_b"])
        attn, alpha = T.dot_attention(enc.states, enc.mask, h2)
        pieces = [h2, attn]
        betas: list[T.Tensor] = []
        if self.cfg.uses_context:
            ctx, betas = context_attention(h2, cache)
            pieces.append(ctx)
        h_tilde = T.tanh(T.matmul(T.concat(pieces, axis=-1),
                                  self.params["attn_out"]))
        return StepResult(probs=None, carry=[(h1, c1), (h2, c2)],
                          h_tilde=h_tilde, h_top=h2, alpha=alpha, betas=betas)

    def decode_step(self, y_prev: np.ndarray, carry, enc: EncoderStates,
                    cache: ContextCache, training: bool = False,
                    rng: Optional[np.random.Generator] = None) -> StepResult:
        """One decoding step from the previous target token ids (B,)."""
        emb = T.embedding(self.params["trg_emb"], np.asarray(y_prev))
        emb = self._dropout(emb, training, rng)
        result = self._step(emb, carry, enc, cache, training, rng)
        logits = T.matmul(result.h_tilde, self.params["out_proj"])
        result.probs = T.softmax(logits, axis=-1)
        return result

    def forward_loss(self, pos, cache: ContextCache, training: bool = False,
                     rng: Optional[np.random.Generator] = None
                     ) -> tuple[T.Tensor, EncoderStates, T.Tensor, float]:
        """Teacher-forced mean NLL for one batch position.

        Returns (loss, encoder states, decoder cache states (B,N,H), the
        number of target tokens counted).  The decoder cache state for
        token n is the top-layer state after the decoder consumed y_n, so
        every cached state reflects the tokens emitted so far.
        """
        full_mask = pos.out_mask * pos.active[:, None]
        if full_mask.sum() == 0:
            raise ValueError("forward_loss on a batch position with no active rows")
        enc = self.encode(pos.src, pos.src_mask * pos.active[:, None],
                          training, rng)
        b, n_in = pos.trg_in.shape
        emb = T.embedding(self.params["trg_emb"], pos.trg_in)
        emb = self._dropout(emb, training, rng)
        carry = self.init_carry(enc)
        h_tildes, h_tops = [], []
        for t in range(n_in):
            x_t = T.select(emb, 1, t)
            result = self._step(x_t, carry, enc, cache, training, rng)
            carry = result.carry
            h_tildes.append(result.h_tilde)
            h_tops.append(result.h_top)
        stacked = T.reshape(T.stack(h_tildes, axis=1),
                            (b * n_in, self.cfg.hidden_dim))
        logits = T.matmul(stacked, self.params["out_proj"])
        loss = T.cross_entropy(logits, pos.trg_out.reshape(-1),
                               full_mask.reshape(-1))
        dec_states = T.stack(h_tops[1:], axis=1) if n_in > 1 \
            else T.stack(h_tops, axis=1)
        return loss, enc, dec_states, float(full_mask.sum())


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: TranslationModel, prefix: str) -> None:
    """Write `<prefix>.manifest` (text) and `<prefix>.bin` (little-endian f32)."""
    parent = Path(prefix).parent
    if str(parent) not in ("", "."):
        parent.mkdir(parents=True, exist_ok=True)
    cfg = model.cfg
    lines = [
        f"variant={cfg.variant}",
        f"emb_dim={cfg.emb_dim}",
        f"hidden_dim={cfg.hidden_dim}",
        f"src_vocab_size={cfg.src_vocab_size}",
        f"trg_vocab_size={cfg.trg_vocab_size}",
        f"layers={cfg.layers}",
        f"dropout={cfg.dropout}",
    ]
    for name, p in model.params.items():
        dims = ",".join(str(d) for d in p.shape)
        lines.append(f"param\t{name}\t{dims}")
    with open(f"{prefix}.manifest", "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    with open(f"{prefix}.bin", "wb") as f:
        for p in model.params.values():
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(prefix: str, dtype=np.float32) -> TranslationModel:
    fields: dict[str, str] = {}
    order: list[tuple[str, tuple[int, ...]]] = []
    with open(f"{prefix}.manifest", encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("param\t"):
                _, name, dims = line.split("\t")
                order.append((name, tuple(int(d) for d in dims.split(","))))
            else:
                key, value = line.split("=", 1)
                fields[key] = value
    cfg = ModelConfig(
        variant=fields["variant"],
        emb_dim=int(fields["emb_dim"]),
        hidden_dim=int(fields["hidden_dim"]),
        src_vocab_size=int(fields["src_vocab_size"]),
        trg_vocab_size=int(fields["trg_vocab_size"]),
        layers=int(fields["layers"]),
        dropout=float(fields["dropout"]),
    )
    blob = np.fromfile(f"{prefix}.bin", dtype="<f4")
    params: dict[str, T.Tensor] = {}
    offset = 0
    for name, shape in order:
        size = int(np.prod(shape))
        chunk = blob[offset:offset + size].reshape(shape)
        params[name] = T.Tensor(chunk, requires_grad=True, dtype=dtype)
        offset += size
    if offset != blob.size:
        raise ValueError(f"checkpoint blob size mismatch at {prefix}.bin")
    return TranslationModel(cfg, params=params, dtype=dtype)
