"""A toy decoder transformer over a visual-token prefix.

Patch features are linearly projected into the token space and prefixed
to the embedded text; text positions use learned absolute encodings and
causal masking while every position may attend to all visual tokens.
The base model is frozen after random init; all learning happens in the
adapters. Every forward pass returns logits for all positions plus the
complete per-layer, per-head attention stack.
"""

from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .adapters import AdapterConfig, AdapterSet, kmoe_apply, kmoe_gate_weights, \
    qmoe_apply, qmoe_weights
from .attention import AttentionStack, Spans
from .autodiff import Tensor
from .errors import CapacityError, ShapeError

CHECKPOINT_SCHEMA = "attnalign-checkpoint-1"


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_visual: int = 16
    d_model: int = 64
    vocab_size: int = 64
    grid: int = 8
    max_text_len: int = 16

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ShapeError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        for name in ("n_layers", "n_heads", "d_visual", "d_model", "vocab_size",
                     "grid", "max_text_len"):
            if getattr(self, name) <= 0:
                raise ShapeError(f"{name} must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_visual(self) -> int:
        return self.grid * self.grid

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model


@dataclass
class VisualInput:
    """Patch features on a square grid, row-major token order."""

    features: np.ndarray
    grid: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        n, _ = self.features.shape
        if n != self.grid * self.grid:
            raise ShapeError(f"{n} patches do not fill a {self.grid}x{self.grid} grid")


@dataclass
class ForwardOutput:
    logits: Tensor                     # [S x V], one row per sequence position
    attention: AttentionStack
    hidden_prompt: list[np.ndarray]    # per layer, prompt-position inputs
    hidden_visual: list[np.ndarray]    # per layer, visual-position inputs
    spans: Spans

    def answer_logit_rows(self) -> tuple[int, ...]:
        """Rows whose logits predict the answer tokens, in order."""
        s = self.spans
        first = s.n_visual + s.n_prompt - 1
        return tuple(range(first, first + s.n_answer))


@dataclass
class GenerationResult:
    tokens: tuple[int, ...]
    stacks: list[AttentionStack]
    step_rows: tuple[int, ...]   # emitting query row of each step


_mask_cache: dict[tuple[int, int], np.ndarray] = {}


def sequence_mask(total: int, n_visual: int) -> np.ndarray:
    """True where key k is visible from query q: k visual, or k <= q."""
    key = (total, n_visual)
    cached = _mask_cache.get(key)
    if cached is None:
        k = np.arange(total)
        cached = (k[None, :] < n_visual) | (k[None, :] <= k[:, None])
        _mask_cache[key] = cached
    return cached


class VisualDecoder:
    """Frozen-base decoder; adapters are passed per call."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config

        # the base stays frozen, standing in for a pretrained backbone, so
        # weights get inference-scale (1/sqrt fan-in) rather than training init
        def w(d_out, d_in):
            return Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_out, d_in)))

        # smooth init for the frozen positional table, like a trained LM's;
        # uncorrelated random positions would decouple adjacent text rows
        t = np.arange(c.max_text_len)[:, None]
        freq = np.exp(-np.log(10000.0) * np.arange(0, c.d_model, 2) / c.d_model)
        pos = np.zeros((c.max_text_len, c.d_model))
        pos[:, 0::2] = np.sin(t * freq)
        pos[:, 1::2] = np.cos(t * freq)

        self.params: dict[str, Tensor] = {
            "w_align": Tensor(rng.normal(0.0, 1.0 / np.sqrt(c.d_visual),
                                         size=(c.d_visual, c.d_model))),
            "b_align": Tensor(np.zeros(c.d_model)),
            "tok_emb": Tensor(rng.normal(0.0, 1.0, size=(c.vocab_size, c.d_model))),
            "pos_emb": Tensor(pos),
            "ln_f.g": Tensor(np.ones(c.d_model)),
            "ln_f.b": Tensor(np.zeros(c.d_model)),
            "w_out": w(c.vocab_size, c.d_model),
        }
        for l in range(c.n_layers):
            p = f"layer{l}."
            self.params[p + "ln1.g"] = Tensor(np.ones(c.d_model))
            self.params[p + "ln1.b"] = Tensor(np.zeros(c.d_model))
            self.params[p + "wq"] = w(c.d_model, c.d_model)
            self.params[p + "wk"] = w(c.d_model, c.d_model)
            self.params[p + "wv"] = w(c.d_model, c.d_model)
            self.params[p + "wo"] = w(c.d_model, c.d_model)
            self.params[p + "ln2.g"] = Tensor(np.ones(c.d_model))
            self.params[p + "ln2.b"] = Tensor(np.zeros(c.d_model))
            self.params[p + "ff1"] = w(c.d_ff, c.d_model)
            self.params[p + "ff2"] = w(c.d_model, c.d_ff)

    # -- pieces ------------------------------------------------------------

    def encode_and_project(self, visual: VisualInput) -> Tensor:
        """Patch features into token space: X w_align + b_align."""
        c = self.config
        if visual.features.shape != (c.n_visual, c.d_visual):
            raise ShapeError(
                f"visual features {visual.features.shape} != "
                f"({c.n_visual}, {c.d_visual})"
            )
        x = Tensor(visual.features)
        return ad.add(ad.matmul(x, self.params["w_align"]), self.params["b_align"])

    def _embed_text(self, token_ids: tuple[int, ...]) -> Tensor:
        c = self.config
        ids = np.asarray(token_ids, dtype=np.intp)
        if ids.size and (ids.min() < 0 or ids.max() >= c.vocab_size):
            raise IndexError(f"token id outside [0, {c.vocab_size})")
        if ids.size > c.max_text_len:
            raise CapacityError(
                f"{ids.size} text tokens exceed max_text_len={c.max_text_len}"
            )
        tok = ad.take(self.params["tok_emb"], ids)
        pos = ad.take(self.params["pos_emb"], np.arange(ids.size))
        return ad.add(tok, pos)

    # -- forward -----------------------------------------------------------

    def forward(self, visual: VisualInput, prompt: tuple[int, ...],
                answer: tuple[int, ...] = (),
                adapters: AdapterSet | None = None) -> ForwardOutput:
        c = self.config
        prompt = tuple(int(t) for t in prompt)
        answer = tuple(int(t) for t in answer)
        if not prompt:
            raise ShapeError("prompt must contain at least one token")
        spans = Spans(c.n_visual, len(prompt), len(answer))

        x_visual = self.encode_and_project(visual)
        x_text = self._embed_text(prompt + answer)
        x = ad.concat_rows([x_visual, x_text])
        mask = sequence_mask(spans.total, c.n_visual)

        planes: list[Tensor] = []
        hidden_prompt: list[np.ndarray] = []
        hidden_visual: list[np.ndarray] = []
        for l in range(c.n_layers):
            # the gates in layer l see exactly these incoming hidden states
            hidden_prompt.append(
                x.data[spans.prompt_range.start: spans.prompt_range.stop].copy())
            hidden_visual.append(x.data[: c.n_visual].copy())
            x, att = self._layer(l, x, spans, mask, adapters)
            planes.append(att)
        x = ad.layer_norm_rows(x, self.params["ln_f.g"], self.params["ln_f.b"])
        logits = ad.linear_with_lora(x, self.params["w_out"])
        return ForwardOutput(logits=logits,
                             attention=AttentionStack(planes=planes, spans=spans),
                             hidden_prompt=hidden_prompt,
                             hidden_visual=hidden_visual,
                             spans=spans)

    def _layer(self, l: int, x: Tensor, spans: Spans, mask: np.ndarray,
               adapters: AdapterSet | None):
        c = self.config
        p = self.params
        pre = f"layer{l}."
        la = adapters.layers[l] if adapters is not None else None
        acfg = adapters.cfg if adapters is not None else None

        def lwl(inp, w, lora):
            if lora is None:
                return ad.linear_with_lora(inp, w)
            return ad.linear_with_lora(inp, w, lora.A, lora.B, lora.scale)

        h = ad.layer_norm_rows(x, p[pre + "ln1.g"], p[pre + "ln1.b"])

        # with a MoE branch removed, its projection falls back to dense LoRA
        lora_on_q = la is not None and (acfg.dense_lora_on_qk or not acfg.use_qmoe)
        lora_on_k = la is not None and (acfg.dense_lora_on_qk or not acfg.use_kmoe)

        q = lwl(h, p[pre + "wq"], la.lora_q if lora_on_q else None)
        if la is not None and acfg.use_qmoe:
            h_prompt = ad.slice_rows(x, spans.prompt_range.start,
                                     spans.prompt_range.stop)
            alpha, q_dec = qmoe_weights(h_prompt, la.q_bank, la.q_gate)
            adapters.last_decisions[f"layer{l}.q"] = q_dec
            q = ad.add(q, qmoe_apply(h, alpha, la.q_bank))

        k = lwl(h, p[pre + "wk"], la.lora_k if lora_on_k else None)
        if la is not None and acfg.use_kmoe:
            h_vis_gate = ad.slice_rows(x, 0, c.n_visual)
            weights, k_dec = kmoe_gate_weights(h_vis_gate, la.k_bank, la.k_gate,
                                               acfg.top_b, acfg.renormalize_topb)
            adapters.last_decisions[f"layer{l}.k"] = k_dec
            k_vis = ad.add(ad.slice_rows(k, 0, c.n_visual),
                           kmoe_apply(ad.slice_rows(h, 0, c.n_visual), weights,
                                      la.k_bank))
            k = ad.concat_rows([k_vis, ad.slice_rows(k, c.n_visual, spans.total)])

        v = lwl(h, p[pre + "wv"], la.lora_v if la is not None else None)

        q3 = ad.split_heads(q, c.n_heads)
        k3 = ad.split_heads(k, c.n_heads)
        v3 = ad.split_heads(v, c.n_heads)
        att = ad.softmax_heads(
            ad.mul(ad.bmm(q3, ad.transpose_last2(k3)), 1.0 / np.sqrt(c.head_dim)),
            mask)
        merged = ad.merge_heads(ad.bmm(att, v3))
        out = lwl(merged, p[pre + "wo"], la.lora_o if la is not None else None)
        x = ad.add(x, out)

        h2 = ad.layer_norm_rows(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        f = lwl(h2, p[pre + "ff1"], la.lora_ff1 if la is not None else None)
        f = lwl(ad.gelu(f), p[pre + "ff2"], la.lora_ff2 if la is not None else None)
        x = ad.add(x, f)
        return x, att

    # -- inference ---------------------------------------------------------

    def generate_greedy(self, visual: VisualInput, prompt: tuple[int, ...],
                        max_len: int,
                        adapters: AdapterSet | None = None) -> GenerationResult:
        if max_len < 1:
            raise CapacityError(f"max_len must be >= 1, got {max_len}")
        generated: list[int] = []
        stacks = []
        step_rows = []
        with ad.no_grad():
            for _ in range(max_len):
                out = self.forward(visual, prompt, tuple(generated), adapters)
                row = out.spans.total - 1
                nxt = int(np.argmax(out.logits.data[row]))
                stacks.append(out.attention)
                step_rows.append(row)
                generated.append(nxt)
        return GenerationResult(tokens=tuple(generated), stacks=stacks,
                                step_rows=tuple(step_rows))


# ---------------------------------------------------------------------------
# checkpoint round trip


def _encode_array(a: np.ndarray) -> dict:
    arr = np.ascontiguousarray(a, dtype=np.float64)
    return {"shape": list(arr.shape),
            "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _decode_array(entry: dict) -> np.ndarray:
    raw = base64.b64decode(entry["data"])
    return np.frombuffer(raw, dtype=np.float64).reshape(entry["shape"]).copy()


def save_checkpoint(path: str | Path, model: VisualDecoder,
                    adapters: AdapterSet | None = None,
                    extra: dict | None = None) -> None:
    doc = {
        "schema": CHECKPOINT_SCHEMA,
        "model_config": asdict(model.config),
        "adapter_config": asdict(adapters.cfg) if adapters is not None else None,
        "extra": extra or {},
        "tensors": {name: _encode_array(t.data)
                    for name, t in sorted(model.params.items())},
        "adapter_tensors": ({name: _encode_array(t.data)
                             for name, t in adapters.params()}
                            if adapters is not None else {}),
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=0) + "\n")


def load_checkpoint(path: str | Path) -> tuple[VisualDecoder, AdapterSet | None, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != CHECKPOINT_SCHEMA:
        raise ShapeError(f"unknown checkpoint schema {doc.get('schema')!r}")
    config = ModelConfig(**doc["model_config"])
    model = VisualDecoder(config)
    for name, entry in doc["tensors"].items():
        model.params[name] = Tensor(_decode_array(entry))
    adapters = None
    if doc["adapter_config"] is not None:
        acfg = AdapterConfig(**doc["adapter_config"])
        adapters = AdapterSet(config.n_layers, config.d_model, config.d_ff, acfg)
        by_name = dict(adapters.params())
        for name, entry in doc["adapter_tensors"].items():
            by_name[name].data = _decode_array(entry)
    return model, adapters, doc.get("extra", {})
