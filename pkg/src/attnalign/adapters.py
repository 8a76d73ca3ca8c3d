"""Low-rank adapters and routed expert mixtures for attention projections.

Every decoder linear map carries a dense LoRA delta. Query projections
additionally take a prompt-routed mixture of low-rank experts (one
mixing weight vector per forward pass, shared by all tokens), and key
projections take a token-routed sparse mixture (per visual token, only
the top-B gate weights survive, unrenormalized by default).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ParameterError, ShapeError


@dataclass
class AdapterConfig:
    """Adapter hyperparameters; defaults are the toy-scale settings."""

    dense_rank: int = 8
    expert_rank: int = 4
    n_q_experts: int = 4
    n_k_experts: int = 8
    top_b: int = 2
    use_qmoe: bool = True
    use_kmoe: bool = True
    dense_lora_on_qk: bool = True
    renormalize_topb: bool = False
    gate_hidden: int | None = None  # defaults to d_model // 2
    lora_scale: float = 1.0

    def validate(self) -> None:
        if self.use_kmoe and not (1 <= self.top_b <= self.n_k_experts):
            raise ParameterError(
                f"top_b={self.top_b} outside [1, {self.n_k_experts}]"
            )
        if self.n_q_experts < 1 or self.n_k_experts < 1:
            raise ParameterError("expert counts must be >= 1")


class LoRAAdapter:
    """delta = scale * B @ A with A [r x d_in], B [d_out x r], B zero-initialized."""

    def __init__(self, d_out: int, d_in: int, rank: int, rng: np.random.Generator,
                 scale: float = 1.0):
        if rank < 1:
            raise ParameterError(f"LoRA rank must be >= 1, got {rank}")
        bound = 1.0 / np.sqrt(d_in)
        self.A = Tensor(rng.uniform(-bound, bound, size=(rank, d_in)),
                        requires_grad=True)
        self.B = Tensor(np.zeros((d_out, rank)), requires_grad=True)
        self.rank = rank
        self.scale = scale

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    def delta(self) -> Tensor:
        d = ad.matmul(self.B, self.A)
        return d if self.scale == 1.0 else ad.mul(d, self.scale)

    def apply(self, x: Tensor) -> Tensor:
        """x @ delta^T without materializing the full matrix."""
        out = ad.matmul(ad.matmul(x, ad.transpose(self.A)), ad.transpose(self.B))
        return out if self.scale == 1.0 else ad.mul(out, self.scale)

    def params(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(prefix + ".A", self.A), (prefix + ".B", self.B)]


class ExpertBank:
    """A list of equally-shaped low-rank experts."""

    def __init__(self, experts: list[LoRAAdapter]):
        if not experts:
            raise ParameterError("expert bank needs at least one expert")
        shape = (experts[0].d_out, experts[0].d_in, experts[0].rank)
        for e in experts:
            if (e.d_out, e.d_in, e.rank) != shape:
                raise ShapeError("experts in one bank must share shapes")
        self.experts = experts

    def __len__(self) -> int:
        return len(self.experts)

    @staticmethod
    def build(n: int, d_out: int, d_in: int, rank: int,
              rng: np.random.Generator) -> "ExpertBank":
        return ExpertBank([LoRAAdapter(d_out, d_in, rank, rng) for _ in range(n)])

    def params(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = []
        for i, e in enumerate(self.experts):
            out.extend(e.params(f"{prefix}.expert{i}"))
        return out


class GatingNetwork:
    """Two-layer MLP producing one routing logit per expert."""

    def __init__(self, d_in: int, d_hidden: int, n_out: int,
                 rng: np.random.Generator, init_std: float = 0.2):
        self.w1 = Tensor(rng.normal(0.0, init_std, size=(d_in, d_hidden)),
                         requires_grad=True)
        self.b1 = Tensor(np.zeros(d_hidden), requires_grad=True)
        self.w2 = Tensor(rng.normal(0.0, init_std, size=(d_hidden, n_out)),
                         requires_grad=True)
        self.b2 = Tensor(np.zeros(n_out), requires_grad=True)

    @property
    def n_out(self) -> int:
        return self.w2.shape[1]

    def logits(self, h: Tensor) -> Tensor:
        """h is [m x d_in]; returns [m x n_out]."""
        return ad.mlp_two_layer(h, self.w1, self.b1, self.w2, self.b2)

    def params(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(prefix + ".w1", self.w1), (prefix + ".b1", self.b1),
                (prefix + ".w2", self.w2), (prefix + ".b2", self.b2)]


@dataclass
class RouterDecision:
    """Routing outcome for one delta: full gate weights and the survivors."""

    weights: np.ndarray
    kept: np.ndarray
    top_b: int


def topb_mask(weights: np.ndarray, b: int) -> np.ndarray:
    """Boolean mask of the b largest entries, ties broken by ascending index."""
    n = weights.shape[0]
    if not (1 <= b <= n):
        raise ParameterError(f"top_b={b} outside [1, {n}]")
    order = np.lexsort((np.arange(n), -weights))
    mask = np.zeros(n, dtype=bool)
    mask[order[:b]] = True
    return mask


def topb_mask_rows(weights: np.ndarray, b: int) -> np.ndarray:
    """Row-wise topb_mask; stable argsort keeps the ascending-index tie rule."""
    m, n = weights.shape
    if not (1 <= b <= n):
        raise ParameterError(f"top_b={b} outside [1, {n}]")
    order = np.argsort(-weights, axis=1, kind="stable")
    mask = np.zeros((m, n), dtype=bool)
    np.put_along_axis(mask, order[:, :b], True, axis=1)
    return mask


def qmoe_weights(h_prompt: Tensor, bank: ExpertBank,
                 gate: GatingNetwork) -> tuple[Tensor, RouterDecision]:
    """Prompt-level router weights: softmax(MLP(mean(h_prompt))), length O."""
    if h_prompt.shape[0] < 1:
        raise ShapeError("prompt routing needs at least one prompt row")
    pooled = ad.reshape(ad.mean_pool_rows(h_prompt), (1, h_prompt.shape[1]))
    alpha = ad.reshape(ad.softmax_rows(gate.logits(pooled)), (len(bank),))
    decision = RouterDecision(weights=alpha.data.copy(),
                              kept=np.ones(len(bank), dtype=bool),
                              top_b=len(bank))
    return alpha, decision


def qmoe_delta(h_prompt: Tensor, bank: ExpertBank,
               gate: GatingNetwork) -> tuple[Tensor, RouterDecision]:
    """Prompt-routed dense mixture, materialized as one [d x d] delta.

    The delta is shared by every token's query projection this pass. The
    model's hot path applies the same mixture in factored form
    (`qmoe_apply`); both agree to 1e-12.
    """
    alpha, decision = qmoe_weights(h_prompt, bank, gate)
    delta: Tensor | None = None
    for o, expert in enumerate(bank.experts):
        term = ad.mul(ad.element(alpha, (o,)), expert.delta())
        delta = term if delta is None else ad.add(delta, term)
    return delta, decision


def qmoe_apply(x: Tensor, alpha: Tensor, bank: ExpertBank) -> Tensor:
    """x @ delta^T for the alpha-weighted mixture, without materializing it."""
    return ad.lowrank_mix_apply(x, alpha,
                                [e.A for e in bank.experts],
                                [e.B for e in bank.experts],
                                scale=bank.experts[0].scale)


def kmoe_gate_weights(h_tokens: Tensor, bank: ExpertBank, gate: GatingNetwork,
                      b: int, renormalize: bool = False
                      ) -> tuple[Tensor, list[RouterDecision]]:
    """Per-token sparse gate weights [n_tokens x n_experts].

    Row c holds softmax(MLP(h_c)) with everything outside its top-b
    entries zeroed; surviving weights are not renormalized unless asked.
    """
    if not (1 <= b <= len(bank)):
        raise ParameterError(f"top_b={b} outside [1, {len(bank)}]")
    beta = ad.softmax_rows(gate.logits(h_tokens))
    keep = topb_mask_rows(beta.data, b)
    masked = ad.mul(beta, Tensor(keep.astype(np.float64)))
    if renormalize:
        row_sum = ad.reshape(ad.matmul(masked, Tensor(np.ones((len(bank), 1)))),
                             (h_tokens.shape[0],))
        inv = ad.div(Tensor(np.ones(h_tokens.shape[0])), row_sum)
        masked = ad.scale_rows(masked, inv)
    decisions = [RouterDecision(weights=beta.data[c].copy(), kept=keep[c], top_b=b)
                 for c in range(h_tokens.shape[0])]
    return masked, decisions


def kmoe_delta_per_token(h_tokens: Tensor, bank: ExpertBank, gate: GatingNetwork,
                         b: int, renormalize: bool = False
                         ) -> tuple[list[Tensor], list[RouterDecision]]:
    """Materialized per-token deltas (reference path; tests and inspection)."""
    weights, decisions = kmoe_gate_weights(h_tokens, bank, gate, b, renormalize)
    deltas = []
    for c in range(h_tokens.shape[0]):
        delta: Tensor | None = None
        for o, expert in enumerate(bank.experts):
            if not decisions[c].kept[o]:
                continue
            term = ad.mul(ad.element(weights, (c, o)), expert.delta())
            delta = term if delta is None else ad.add(delta, term)
        deltas.append(delta)
    return deltas, decisions


def kmoe_apply(x: Tensor, weights: Tensor, bank: ExpertBank) -> Tensor:
    """Row-wise x_c @ delta_c^T in factored form.

    Equals applying the materialized per-token deltas row by row, to
    1e-12, at a fraction of the tape size.
    """
    return ad.lowrank_rows_apply(x, weights,
                                 [e.A for e in bank.experts],
                                 [e.B for e in bank.experts],
                                 scale=bank.experts[0].scale)


def adapted_projection(x: Tensor, base_w: Tensor,
                       dense_lora: LoRAAdapter | None = None,
                       moe_delta: Tensor | None = None,
                       per_token_deltas: list[Tensor] | None = None) -> Tensor:
    """output_row_i = x_i @ (base_w + dense_delta + moe_delta_i)^T.

    ``moe_delta`` is one matrix shared by all rows (query-side);
    ``per_token_deltas`` supplies one matrix per leading row, None for
    rows without a delta (key-side; text rows stay dense-only).
    """
    if len(x.shape) != 2 or base_w.shape[1] != x.shape[1]:
        raise ShapeError(f"projection: input {x.shape} vs weight {base_w.shape}")
    out = ad.matmul(x, ad.transpose(base_w))
    if dense_lora is not None:
        out = ad.add(out, dense_lora.apply(x))
    if moe_delta is not None:
        out = ad.add(out, ad.matmul(x, ad.transpose(moe_delta)))
    if per_token_deltas is not None:
        if len(per_token_deltas) > x.shape[0]:
            raise ShapeError("more per-token deltas than rows")
        rows = []
        for i, delta in enumerate(per_token_deltas):
            row = ad.slice_rows(x, i, i + 1)
            if delta is None:
                rows.append(Tensor(np.zeros((1, out.shape[1]))))
            else:
                rows.append(ad.matmul(row, ad.transpose(delta)))
        if len(per_token_deltas) < x.shape[0]:
            pad = Tensor(np.zeros((x.shape[0] - len(per_token_deltas), out.shape[1])))
            rows.append(pad)
        out = ad.add(out, ad.concat_rows(rows))
    return out


class LayerAdapters:
    """All trainable pieces attached to one decoder layer."""

    def __init__(self, d_model: int, d_ff: int, cfg: AdapterConfig,
                 rng: np.random.Generator):
        r = cfg.dense_rank
        self.lora_q = LoRAAdapter(d_model, d_model, r, rng, cfg.lora_scale)
        self.lora_k = LoRAAdapter(d_model, d_model, r, rng, cfg.lora_scale)
        self.lora_v = LoRAAdapter(d_model, d_model, r, rng, cfg.lora_scale)
        self.lora_o = LoRAAdapter(d_model, d_model, r, rng, cfg.lora_scale)
        self.lora_ff1 = LoRAAdapter(d_ff, d_model, r, rng, cfg.lora_scale)
        self.lora_ff2 = LoRAAdapter(d_model, d_ff, r, rng, cfg.lora_scale)
        d_gate = cfg.gate_hidden or d_model // 2
        self.q_bank = self.q_gate = None
        self.k_bank = self.k_gate = None
        if cfg.use_qmoe:
            self.q_bank = ExpertBank.build(cfg.n_q_experts, d_model, d_model,
                                           cfg.expert_rank, rng)
            self.q_gate = GatingNetwork(d_model, d_gate, cfg.n_q_experts, rng)
        if cfg.use_kmoe:
            self.k_bank = ExpertBank.build(cfg.n_k_experts, d_model, d_model,
                                           cfg.expert_rank, rng)
            self.k_gate = GatingNetwork(d_model, d_gate, cfg.n_k_experts, rng)

    def params(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = []
        for name in ("lora_q", "lora_k", "lora_v", "lora_o", "lora_ff1", "lora_ff2"):
            out.extend(getattr(self, name).params(f"{prefix}.{name}"))
        if self.q_bank is not None:
            out.extend(self.q_bank.params(f"{prefix}.qmoe"))
            out.extend(self.q_gate.params(f"{prefix}.qgate"))
        if self.k_bank is not None:
            out.extend(self.k_bank.params(f"{prefix}.kmoe"))
            out.extend(self.k_gate.params(f"{prefix}.kgate"))
        return out


class AdapterSet:
    """Per-layer adapters plus the routing configuration."""

    def __init__(self, n_layers: int, d_model: int, d_ff: int, cfg: AdapterConfig,
                 seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.layers = [LayerAdapters(d_model, d_ff, cfg, rng)
                       for _ in range(n_layers)]
        self.last_decisions: dict[str, object] = {}

    def params(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.params(f"adapter.layer{i}"))
        return out

    def trainable_tensors(self) -> list[Tensor]:
        return [t for _, t in self.params()]

    def zero_grads(self) -> None:
        for t in self.trainable_tensors():
            t.zero_grad()
