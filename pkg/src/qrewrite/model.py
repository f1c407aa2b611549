"""Seq2seq transformer that rewrites a question over sequential steps.

Each step encodes one document (with the answer and bridge entities) and
decodes a question.  Decoder self-attention and cross-attention read key and
value blocks accumulated from every earlier step, so the question generated
at step t can be rewritten at step t+1 without ever re-feeding its tokens.
Only the final step carries supervision; gradients reach earlier steps
through the cached hidden-state blocks, not through the discrete token
choices made by greedy search.

Conventions, fixed here once:
  * sinusoidal positions restart at 0 for every step's encoder input and
    every step's decoder sequence; sealed cache rows keep the positions
    they were computed with;
  * the <bos> row of each step is cached, the <eos> row never is, so a
    sealed self-attention block for a step with question Q has len(Q) + 1
    rows;
  * greedy ties break toward the lowest token id;
  * pre-norm residual blocks, ReLU feed-forward;
  * the output head is the transpose of the token embedding (tied), which
    makes copy behaviour generalize to entities unseen as training targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import LengthError, ShapeError


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    max_len: int = 128
    mode_accumulated_sa: bool = True
    mode_accumulated_ca: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ShapeError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if min(self.vocab_size, self.d_model, self.d_ff, self.max_len) < 1:
            raise ShapeError("all model dimensions must be positive")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "n_enc_layers": self.n_enc_layers,
            "n_dec_layers": self.n_dec_layers,
            "max_len": self.max_len,
            "mode_accumulated_sa": self.mode_accumulated_sa,
            "mode_accumulated_ca": self.mode_accumulated_ca,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class StepInput:
    """Token ids of one assembled step input."""

    tokens: list[int]
    step_index: int


@dataclass
class StepOutput:
    question_tokens: list[int]
    encoder_output: Tensor
    truncated: bool = False
    logits_rows: list[Tensor] | None = None


class AttentionCache:
    """Per-layer, per-head K/V blocks sealed by completed steps.

    Blocks are append-only: once a step seals, its blocks are never touched
    again.  ``step_lengths[i]`` is the number of self-attention rows sealed
    by step i (question length + 1 for <bos>); ``context_lengths[i]`` is
    that step's encoder input length.
    """

    def __init__(self, n_layers: int, n_heads: int):
        self.sa_keys = [[[] for _ in range(n_heads)] for _ in range(n_layers)]
        self.sa_values = [[[] for _ in range(n_heads)] for _ in range(n_layers)]
        self.ca_keys = [[[] for _ in range(n_heads)] for _ in range(n_layers)]
        self.ca_values = [[[] for _ in range(n_heads)] for _ in range(n_layers)]
        self.step_lengths: list[int] = []
        self.context_lengths: list[int] = []

    @property
    def steps_completed(self) -> int:
        return len(self.step_lengths)

    @property
    def sa_rows(self) -> int:
        return sum(self.step_lengths)

    @property
    def ca_rows(self) -> int:
        return sum(self.context_lengths)


@dataclass
class StepState:
    """Decoder state for the step currently being decoded."""

    encoder_output: Tensor
    sa_prior_k: list[list[Tensor | None]]
    sa_prior_v: list[list[Tensor | None]]
    ca_k: list[list[Tensor]]          # accumulated (prior + current) per layer/head
    ca_v: list[list[Tensor]]
    ca_current_k: list[list[Tensor]]  # this step's blocks, for sealing
    ca_current_v: list[list[Tensor]]
    sa_k_rows: list[list[Tensor]] = field(default_factory=list)
    sa_v_rows: list[list[Tensor]] = field(default_factory=list)
    n_fed: int = 0


@dataclass
class RewriteResult:
    intermediate_tokens: list[list[int]]
    final_tokens: list[int] | None
    final_logits: Tensor | None
    final_targets: list[int] | None
    truncated: list[bool]
    cache: AttentionCache
    step_logits: list[list[Tensor]] | None = None


def within_step_causal_mask(n_prior: int, n_step: int) -> np.ndarray:
    """Allow mask for step-local queries: every prior-step row plus the
    causal prefix of the current block."""
    allow = np.zeros((n_step, n_prior + n_step), dtype=bool)
    allow[:, :n_prior] = True
    allow[:, n_prior:] = np.tril(np.ones((n_step, n_step), dtype=bool))
    return allow


def accumulated_attention(
    q: Tensor,
    prior_keys: Sequence[Tensor],
    prior_values: Sequence[Tensor],
    current_k: Tensor,
    current_v: Tensor,
    causal_within_step: bool,
) -> Tensor:
    """Scaled dot-product attention over [prior blocks; current block].

    Queries always see every prior-step row.  With ``causal_within_step``
    query i sees current rows 0..i (the query count must equal the current
    block's row count); otherwise it sees the whole current block.
    """
    d_k = q.shape[1]
    for blk in (*prior_keys, *prior_values, current_k, current_v):
        if blk.shape[1] != d_k:
            raise ShapeError(
                f"attention block width {blk.shape[1]} != query width {d_k}"
            )
    if len(prior_keys) != len(prior_values):
        raise ShapeError("prior key/value block counts differ")
    keys = ad.concat_rows([*prior_keys, current_k]) if prior_keys else current_k
    values = ad.concat_rows([*prior_values, current_v]) if prior_values else current_v
    scores = ad.scale(ad.matmul_nt(q, keys), 1.0 / math.sqrt(d_k))
    allow = None
    if causal_within_step:
        n_prior = keys.shape[0] - current_k.shape[0]
        if q.shape[0] != current_k.shape[0]:
            raise ShapeError(
                "causal attention needs one query per current-block row"
            )
        allow = within_step_causal_mask(n_prior, current_k.shape[0])
    return ad.matmul(ad.softmax_rows(scores, allow), values)


def sinusoidal_positions(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    dim = np.arange(d_model, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2.0 * (dim // 2)) / d_model)
    table = np.zeros((max_len, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angle[:, 0::2])
    table[:, 1::2] = np.cos(angle[:, 1::2])
    return table


class QuestionRewriter:
    """Encoder-decoder with accumulated attention, parameters shared by all steps."""

    def __init__(
        self,
        cfg: ModelConfig,
        rng: np.random.Generator | None = None,
        dtype=np.float64,
    ):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ShapeError(f"unsupported precision {dtype}")
        rng = rng or np.random.default_rng(0)
        self.params: dict[str, Tensor] = {}
        self._init_params(rng)
        self._pos = sinusoidal_positions(cfg.max_len, cfg.d_model).astype(self.dtype)

    # ------------------------------------------------------------------
    # parameters

    def _add_param(self, name: str, arr: np.ndarray) -> None:
        self.params[name] = Tensor(arr.astype(self.dtype), requires_grad=True)

    def _init_attn(self, prefix: str, rng, d: int) -> None:
        # q/k/v projections carry no bias (a key bias is provably inert:
        # softmax removes per-row constant score shifts)
        for w in ("wq", "wk", "wv", "wo"):
            self._add_param(f"{prefix}.{w}", rng.normal(0.0, 0.02, (d, d)))
        self._add_param(f"{prefix}.bo", np.zeros(d))

    def _init_params(self, rng) -> None:
        cfg = self.cfg
        d, f = cfg.d_model, cfg.d_ff
        self._add_param("emb.tok", rng.normal(0.0, 0.02, (cfg.vocab_size, d)))
        for i in range(cfg.n_enc_layers):
            p = f"enc.l{i}"
            self._add_param(f"{p}.ln1.g", np.ones(d))
            self._add_param(f"{p}.ln1.b", np.zeros(d))
            self._init_attn(f"{p}.sa", rng, d)
            self._add_param(f"{p}.ln2.g", np.ones(d))
            self._add_param(f"{p}.ln2.b", np.zeros(d))
            self._add_param(f"{p}.ff.w1", rng.normal(0.0, 0.02, (d, f)))
            self._add_param(f"{p}.ff.b1", np.zeros(f))
            self._add_param(f"{p}.ff.w2", rng.normal(0.0, 0.02, (f, d)))
            self._add_param(f"{p}.ff.b2", np.zeros(d))
        self._add_param("enc.lnf.g", np.ones(d))
        self._add_param("enc.lnf.b", np.zeros(d))
        for i in range(cfg.n_dec_layers):
            p = f"dec.l{i}"
            self._add_param(f"{p}.ln1.g", np.ones(d))
            self._add_param(f"{p}.ln1.b", np.zeros(d))
            self._init_attn(f"{p}.sa", rng, d)
            self._add_param(f"{p}.ln2.g", np.ones(d))
            self._add_param(f"{p}.ln2.b", np.zeros(d))
            self._init_attn(f"{p}.ca", rng, d)
            self._add_param(f"{p}.ln3.g", np.ones(d))
            self._add_param(f"{p}.ln3.b", np.zeros(d))
            self._add_param(f"{p}.ff.w1", rng.normal(0.0, 0.02, (d, f)))
            self._add_param(f"{p}.ff.b1", np.zeros(f))
            self._add_param(f"{p}.ff.w2", rng.normal(0.0, 0.02, (f, d)))
            self._add_param(f"{p}.ff.b2", np.zeros(d))
        self._add_param("dec.lnf.g", np.ones(d))
        self._add_param("dec.lnf.b", np.zeros(d))
        self._add_param("out.b", np.zeros(cfg.vocab_size))

    def num_params(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def load_param_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = set(self.params) ^ set(arrays)
            raise ShapeError(f"parameter name mismatch: {sorted(missing)[:5]}")
        for name, arr in arrays.items():
            tgt = self.params[name]
            if arr.shape != tgt.data.shape:
                raise ShapeError(f"shape mismatch for {name}")
            tgt.data = arr.astype(self.dtype)

    # ------------------------------------------------------------------
    # shared sublayers

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return ad.layer_norm_rows(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _project(self, x: Tensor, prefix: str, which: str) -> Tensor:
        p = self.params
        out = ad.matmul(x, p[f"{prefix}.w{which}"])
        if which == "o":
            out = ad.add(out, p[f"{prefix}.bo"])
        return out

    def _heads(self, x_all: Tensor) -> list[Tensor]:
        dk = self.cfg.d_k
        return [
            ad.slice_cols(x_all, h * dk, (h + 1) * dk)
            for h in range(self.cfg.n_heads)
        ]

    def _mha(
        self,
        prefix: str,
        x_q: Tensor,
        prior_k: Sequence[Sequence[Tensor]],
        prior_v: Sequence[Sequence[Tensor]],
        cur_k: Sequence[Tensor],
        cur_v: Sequence[Tensor],
        causal_within_step: bool,
    ) -> Tensor:
        """Multi-head wrapper over ``accumulated_attention``.

        ``prior_k[h]`` is a sequence of sealed blocks for head h (may be
        empty); ``cur_k[h]`` the current block.
        """
        q_heads = self._heads(self._project(x_q, prefix, "q"))
        outs = []
        for h, qh in enumerate(q_heads):
            outs.append(
                accumulated_attention(
                    qh, prior_k[h], prior_v[h], cur_k[h], cur_v[h],
                    causal_within_step,
                )
            )
        merged = ad.concat_cols(outs)
        return self._project(merged, prefix, "o")

    def _ff(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        h = ad.relu(ad.add(ad.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
        return ad.add(ad.matmul(h, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])

    def _embed(self, ids: Sequence[int], pos_start: int = 0) -> Tensor:
        n = len(ids)
        if pos_start + n > self.cfg.max_len:
            raise LengthError(
                f"sequence of {n} tokens from position {pos_start} exceeds "
                f"max_len={self.cfg.max_len}"
            )
        e = ad.scale(
            ad.embedding(self.params["emb.tok"], ids), math.sqrt(self.cfg.d_model)
        )
        return ad.add(e, Tensor(self._pos[pos_start : pos_start + n]))

    # ------------------------------------------------------------------
    # encoder

    def encode(self, step: StepInput) -> Tensor:
        """Encoder stack over one step input; returns (l_t, d_model)."""
        if len(step.tokens) == 0:
            raise ShapeError("encode: empty token sequence")
        x = self._embed(step.tokens)
        for i in range(self.cfg.n_enc_layers):
            p = f"enc.l{i}"
            h = self._ln(x, f"{p}.ln1")
            cur_k = self._heads(self._project(h, f"{p}.sa", "k"))
            cur_v = self._heads(self._project(h, f"{p}.sa", "v"))
            empty = [[] for _ in range(self.cfg.n_heads)]
            x = ad.add(x, self._mha(f"{p}.sa", h, empty, empty, cur_k, cur_v, False))
            x = ad.add(x, self._ff(self._ln(x, f"{p}.ln2"), f"{p}.ff"))
        return self._ln(x, "enc.lnf")

    # ------------------------------------------------------------------
    # decoder

    def new_cache(self) -> AttentionCache:
        return AttentionCache(self.cfg.n_dec_layers, self.cfg.n_heads)

    def start_step(self, encoder_output: Tensor, cache: AttentionCache) -> StepState:
        """Prepare per-step decoder state: project this step's cross-attention
        blocks and snapshot the accumulated views of the sealed cache."""
        cfg = self.cfg
        sa_pk: list[list[Tensor | None]] = []
        sa_pv: list[list[Tensor | None]] = []
        ca_k: list[list[Tensor]] = []
        ca_v: list[list[Tensor]] = []
        cur_ca_k: list[list[Tensor]] = []
        cur_ca_v: list[list[Tensor]] = []
        for i in range(cfg.n_dec_layers):
            p = f"dec.l{i}"
            k_heads = self._heads(self._project(encoder_output, f"{p}.ca", "k"))
            v_heads = self._heads(self._project(encoder_output, f"{p}.ca", "v"))
            cur_ca_k.append(k_heads)
            cur_ca_v.append(v_heads)
            layer_ca_k, layer_ca_v = [], []
            for h in range(cfg.n_heads):
                if cfg.mode_accumulated_ca and cache.ca_keys[i][h]:
                    layer_ca_k.append(
                        ad.concat_rows([*cache.ca_keys[i][h], k_heads[h]])
                    )
                    layer_ca_v.append(
                        ad.concat_rows([*cache.ca_values[i][h], v_heads[h]])
                    )
                else:
                    layer_ca_k.append(k_heads[h])
                    layer_ca_v.append(v_heads[h])
            ca_k.append(layer_ca_k)
            ca_v.append(layer_ca_v)
            layer_pk: list[Tensor | None] = []
            layer_pv: list[Tensor | None] = []
            for h in range(cfg.n_heads):
                if cfg.mode_accumulated_sa and cache.sa_keys[i][h]:
                    layer_pk.append(ad.concat_rows(cache.sa_keys[i][h]))
                    layer_pv.append(ad.concat_rows(cache.sa_values[i][h]))
                else:
                    layer_pk.append(None)
                    layer_pv.append(None)
            sa_pk.append(layer_pk)
            sa_pv.append(layer_pv)
        return StepState(
            encoder_output=encoder_output,
            sa_prior_k=sa_pk,
            sa_prior_v=sa_pv,
            ca_k=ca_k,
            ca_v=ca_v,
            ca_current_k=cur_ca_k,
            ca_current_v=cur_ca_v,
            sa_k_rows=[[] for _ in range(cfg.n_dec_layers)],
            sa_v_rows=[[] for _ in range(cfg.n_dec_layers)],
        )

    def decode_token(
        self,
        state: StepState,
        token: int,
        want_logits: bool = True,
        detach_logits: bool = False,
    ) -> Tensor | None:
        """Feed one token at the next step-local position.

        Appends the position's K/V rows to the within-step state and, when
        ``want_logits``, returns next-token logits of shape (1, vocab).
        ``detach_logits`` keeps the K/V rows on the graph but computes the
        logits head without one; greedy search only argmaxes these logits,
        so no gradient can ever flow through them.
        """
        cfg = self.cfg
        if state.n_fed >= cfg.max_len:
            raise LengthError(f"decoder exceeded max_len={cfg.max_len}")
        x = self._embed([token], pos_start=state.n_fed)
        state.n_fed += 1
        for i in range(cfg.n_dec_layers):
            p = f"dec.l{i}"
            h = self._ln(x, f"{p}.ln1")
            k_row = self._project(h, f"{p}.sa", "k")
            v_row = self._project(h, f"{p}.sa", "v")
            state.sa_k_rows[i].append(k_row)
            state.sa_v_rows[i].append(v_row)
            k_cat = ad.concat_rows(state.sa_k_rows[i])
            v_cat = ad.concat_rows(state.sa_v_rows[i])
            cur_k, cur_v = self._heads(k_cat), self._heads(v_cat)
            prior_k = [
                [state.sa_prior_k[i][h]] if state.sa_prior_k[i][h] is not None else []
                for h in range(cfg.n_heads)
            ]
            prior_v = [
                [state.sa_prior_v[i][h]] if state.sa_prior_v[i][h] is not None else []
                for h in range(cfg.n_heads)
            ]
            # The single query sits at the newest position, so full access to
            # the current rows already equals the causal mask.
            x = ad.add(
                x, self._mha(f"{p}.sa", h, prior_k, prior_v, cur_k, cur_v, False)
            )
            h2 = self._ln(x, f"{p}.ln2")
            no_prior = [[] for _ in range(cfg.n_heads)]
            x = ad.add(
                x,
                self._mha(
                    f"{p}.ca", h2, no_prior, no_prior, state.ca_k[i], state.ca_v[i],
                    False,
                ),
            )
            x = ad.add(x, self._ff(self._ln(x, f"{p}.ln3"), f"{p}.ff"))
        if not want_logits:
            return None
        if detach_logits:
            with ad.no_grad():
                return self._project_out(self._ln(x, "dec.lnf"))
        return self._project_out(self._ln(x, "dec.lnf"))

    def _project_out(self, y: Tensor) -> Tensor:
        # output head tied to the token embedding: copying an input token to
        # the output then generalizes to tokens never emitted in training
        return ad.add(ad.matmul_nt(y, self.params["emb.tok"]), self.params["out.b"])

    def greedy_decode_step(
        self,
        state: StepState,
        bos: int,
        eos: int,
        forced_tokens: Sequence[int] | None = None,
        collect_logits: bool = False,
    ) -> StepOutput:
        """Decode one step greedily (or feed ``forced_tokens`` verbatim).

        Stops at <eos> or when the position table is exhausted; the
        truncation case is flagged, not an error.
        """
        if forced_tokens is not None:
            self.decode_token(state, bos, want_logits=False)
            for tok in forced_tokens:
                self.decode_token(state, tok, want_logits=False)
            return StepOutput(list(forced_tokens), state.encoder_output)

        question: list[int] = []
        logits_rows: list[Tensor] = []
        truncated = False
        tok = bos
        while True:
            # greedy choices are discrete, so these logits never carry loss
            # gradients; keep them off the graph
            logits = self.decode_token(state, tok, want_logits=True, detach_logits=True)
            if collect_logits:
                logits_rows.append(logits)
            nxt = int(np.argmax(logits.data))
            if nxt == eos:
                break
            if state.n_fed >= self.cfg.max_len:
                truncated = True
                break
            question.append(nxt)
            tok = nxt
        return StepOutput(
            question, state.encoder_output, truncated,
            logits_rows if collect_logits else None,
        )

    def seal_step(
        self, state: StepState, cache: AttentionCache, detach: bool = False
    ) -> None:
        """Freeze this step's K/V into the cache.  Sealed blocks are never
        modified by later steps.  ``detach`` drops the blocks' backward
        graph, cutting the gradient path from later losses into this step's
        computations (values are unchanged)."""
        cfg = self.cfg
        if state.n_fed == 0:
            raise ShapeError("cannot seal a step before decoding any position")
        wrap = ad.detach if detach else (lambda t: t)
        for i in range(cfg.n_dec_layers):
            k_block = ad.concat_rows(state.sa_k_rows[i])
            v_block = ad.concat_rows(state.sa_v_rows[i])
            for h, (kh, vh) in enumerate(
                zip(self._heads(k_block), self._heads(v_block))
            ):
                cache.sa_keys[i][h].append(wrap(kh))
                cache.sa_values[i][h].append(wrap(vh))
            for h in range(cfg.n_heads):
                cache.ca_keys[i][h].append(wrap(state.ca_current_k[i][h]))
                cache.ca_values[i][h].append(wrap(state.ca_current_v[i][h]))
        cache.step_lengths.append(state.n_fed)
        cache.context_lengths.append(state.encoder_output.shape[0])

    def teacher_forced_final(
        self, state: StepState, gold_ids: Sequence[int], bos: int, eos: int
    ) -> tuple[Tensor, list[int]]:
        """Batched decoder forward over [<bos>] + gold; returns logits of
        shape (len(gold) + 1, vocab) and the target ids (gold + <eos>)."""
        cfg = self.cfg
        inputs = [bos, *gold_ids]
        x = self._embed(inputs)
        n_step = len(inputs)
        for i in range(cfg.n_dec_layers):
            p = f"dec.l{i}"
            h = self._ln(x, f"{p}.ln1")
            cur_k = self._heads(self._project(h, f"{p}.sa", "k"))
            cur_v = self._heads(self._project(h, f"{p}.sa", "v"))
            prior_k = [
                [state.sa_prior_k[i][h]] if state.sa_prior_k[i][h] is not None else []
                for h in range(cfg.n_heads)
            ]
            prior_v = [
                [state.sa_prior_v[i][h]] if state.sa_prior_v[i][h] is not None else []
                for h in range(cfg.n_heads)
            ]
            x = ad.add(
                x, self._mha(f"{p}.sa", h, prior_k, prior_v, cur_k, cur_v, True)
            )
            h2 = self._ln(x, f"{p}.ln2")
            no_prior = [[] for _ in range(cfg.n_heads)]
            x = ad.add(
                x,
                self._mha(
                    f"{p}.ca", h2, no_prior, no_prior, state.ca_k[i], state.ca_v[i],
                    False,
                ),
            )
            x = ad.add(x, self._ff(self._ln(x, f"{p}.ln3"), f"{p}.ff"))
        y = self._ln(x, "dec.lnf")
        logits = self._project_out(y)
        state.n_fed = n_step
        return logits, [*gold_ids, eos]

    # ------------------------------------------------------------------
    # the rewrite loop

    def rewrite_forward(
        self,
        steps: Sequence[StepInput],
        bos: int,
        eos: int,
        gold_final: Sequence[int] | None = None,
        pinned_intermediates: Sequence[Sequence[int]] | None = None,
        collect_logits: bool = False,
        detach_cache: bool = False,
    ) -> RewriteResult:
        """Run the full multi-step rewrite.

        Steps 1..N-1 greedy-decode (or replay ``pinned_intermediates``) and
        seal their caches.  The final step greedy-decodes at inference time
        or, when ``gold_final`` is given, runs teacher forcing and returns
        per-position logits attached to the whole unrolled graph.
        ``detach_cache`` stops gradients at the sealed blocks; comparing
        gradients with and without it isolates the end-to-end path through
        earlier steps (forward values are identical).
        """
        n = len(steps)
        if n == 0:
            raise ShapeError("rewrite_forward: no steps")
        if pinned_intermediates is not None and len(pinned_intermediates) != n - 1:
            raise ShapeError(
                f"{len(pinned_intermediates)} pinned steps for {n - 1} intermediates"
            )
        cache = self.new_cache()
        intermediates: list[list[int]] = []
        truncated: list[bool] = []
        step_logits: list[list[Tensor]] = []
        for t, step in enumerate(steps, start=1):
            h_enc = self.encode(step)
            state = self.start_step(h_enc, cache)
            if t < n:
                forced = (
                    pinned_intermediates[t - 1]
                    if pinned_intermediates is not None
                    else None
                )
                out = self.greedy_decode_step(
                    state, bos, eos, forced_tokens=forced,
                    collect_logits=collect_logits,
                )
                self.seal_step(state, cache, detach=detach_cache)
                intermediates.append(out.question_tokens)
                truncated.append(out.truncated)
                if collect_logits:
                    step_logits.append(out.logits_rows or [])
                continue
            if gold_final is not None:
                logits, targets = self.teacher_forced_final(state, gold_final, bos, eos)
                return RewriteResult(
                    intermediates, None, logits, targets, truncated, cache,
                    step_logits if collect_logits else None,
                )
            out = self.greedy_decode_step(
                state, bos, eos, collect_logits=collect_logits
            )
            self.seal_step(state, cache)
            truncated.append(out.truncated)
            if collect_logits:
                step_logits.append(out.logits_rows or [])
            return RewriteResult(
                intermediates, out.question_tokens, None, None, truncated, cache,
                step_logits if collect_logits else None,
            )
        raise AssertionError("unreachable")


def final_step_loss(logits: Tensor, gold_ids: Sequence[int], eos: int) -> Tensor:
    """Cross-entropy of the teacher-forced final step against gold + <eos>."""
    targets = [*gold_ids, eos]
    if logits.shape[0] != len(targets):
        raise ShapeError(
            f"{logits.shape[0]} logit rows for {len(targets)} target positions"
        )
    return ad.cross_entropy(logits, targets)
