"""Desk-scale transformer encoder classifier with adapter injection.

The model is deliberately tiny (default: 2 layers, d_model 64, 4 heads)
but structurally faithful: pre-norm residual blocks, multi-head
attention with four square projection matrices per layer, a GELU
feed-forward sublayer, mean pooling, and a linear classifier head.
Adapters wrap any subset of the attention projections; in the
fine-tuning regime only adapter parameters and the head train, and
everything else is frozen and hash-checked.

Activations are laid out feature-major: a batch of B sequences of
length T flows through the network as a d_model x (B*T) matrix whose
columns are tokens, sequence by sequence. Attention uses a block
mask so sequences in a batch never see each other.

LinearTaskModel is the degenerate one-matrix sibling used by planted
regression tasks, where exact optima are known.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .adapters import (
    AdaptedLinear,
    Adapter,
    BaseLinear,
    init_lora,
    init_symlora,
)
from .autodiff import Node, Tape, register_leaves
from .errors import ConfigError, NoAdaptersError
from .matrix import Matrix
from .rng import SeededRng, gaussian_matrix

ATTENTION_TARGETS = ("query", "key", "value", "output")
ADAPTER_KINDS = ("lora", "symlora", "none")


@dataclass(frozen=True)
class TinyTransformerConfig:
    vocab_size: int
    n_classes: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    max_seq_len: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("vocab_size", "n_classes", "d_model", "n_heads",
                     "n_layers", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "n_classes": self.n_classes,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_layers": self.n_layers,
            "max_seq_len": self.max_seq_len,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TinyTransformerConfig":
        return cls(**d)


@dataclass(frozen=True)
class InjectionPolicy:
    """Which projections get which adapter kind, and with what shape."""

    kind: str = "symlora"
    targets: tuple[str, ...] = ("query", "value")
    r: int = 8
    alpha: float = 8.0
    init_std: float = 0.02
    tie_lambda: bool = False
    dropout: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ADAPTER_KINDS:
            raise ConfigError(f"unknown adapter kind {self.kind!r}")
        bad = [t for t in self.targets if t not in ATTENTION_TARGETS]
        if bad:
            raise ConfigError(f"unknown injection targets {bad}")
        if self.kind != "none" and (self.r < 1 or self.alpha <= 0):
            raise ConfigError("rank must be >= 1 and alpha positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "targets": list(self.targets),
            "r": self.r,
            "alpha": self.alpha,
            "init_std": self.init_std,
            "tie_lambda": self.tie_lambda,
            "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InjectionPolicy":
        d = dict(d)
        d["targets"] = tuple(d.get("targets", ("query", "value")))
        return cls(**d)


class _EncoderLayer:
    def __init__(self, index: int, d_model: int, rng: SeededRng):
        d = d_model
        std = 1.0 / np.sqrt(d)
        prefix = f"layer{index}.attention"
        self.projections: dict[str, AdaptedLinear] = {}
        for target in ATTENTION_TARGETS:
            w = gaussian_matrix(d, d, std, rng)
            self.projections[target] = AdaptedLinear(
                BaseLinear(w, layer_index=index, name=f"{prefix}.{target}"))
        self.ffn_w1 = gaussian_matrix(4 * d, d, std, rng).to_numpy().copy()
        self.ffn_w2 = gaussian_matrix(d, 4 * d, 1.0 / np.sqrt(4 * d), rng).to_numpy().copy()
        self.ffn_b1 = np.zeros((4 * d, 1))
        self.ffn_b2 = np.zeros((d, 1))
        self.ln1_gamma = np.ones((d, 1))
        self.ln1_beta = np.zeros((d, 1))
        self.ln2_gamma = np.ones((d, 1))
        self.ln2_beta = np.zeros((d, 1))


class AdaptedModel:
    """A tiny transformer whose attention projections accept adapters."""

    def __init__(self, cfg: TinyTransformerConfig):
        self.cfg = cfg
        self.policy: InjectionPolicy | None = None
        self.train_base = False
        rng = SeededRng(cfg.seed)
        d = cfg.d_model
        self.embedding = gaussian_matrix(d, cfg.vocab_size, 0.02, rng).to_numpy().copy()
        self.pos_embedding = gaussian_matrix(d, cfg.max_seq_len, 0.02, rng).to_numpy().copy()
        self.layers = [_EncoderLayer(i, d, rng) for i in range(cfg.n_layers)]
        self.final_gamma = np.ones((d, 1))
        self.final_beta = np.zeros((d, 1))
        self.head_w = gaussian_matrix(cfg.n_classes, d, 0.02, rng).to_numpy().copy()
        self.head_b = np.zeros((cfg.n_classes, 1))
        self._mask_cache: dict[tuple[int, int], np.ndarray] = {}

    # -- parameter registry ------------------------------------------------

    def param_entries(self) -> list[tuple[str, np.ndarray, bool]]:
        base = self.train_base
        entries: list[tuple[str, np.ndarray, bool]] = [
            ("embedding", self.embedding, base),
            ("pos_embedding", self.pos_embedding, base),
        ]
        for i, layer in enumerate(self.layers):
            pre = f"layer{i}."
            for target in ATTENTION_TARGETS:
                lin = layer.projections[target]
                for key, arr, trainable in lin.param_specs(f"{pre}attention.{target}."):
                    if key.endswith(".W0"):
                        trainable = base
                    entries.append((key, arr, trainable))
            entries.extend([
                (pre + "ln1.gamma", layer.ln1_gamma, base),
                (pre + "ln1.beta", layer.ln1_beta, base),
                (pre + "ffn.W1", layer.ffn_w1, base),
                (pre + "ffn.b1", layer.ffn_b1, base),
                (pre + "ffn.W2", layer.ffn_w2, base),
                (pre + "ffn.b2", layer.ffn_b2, base),
                (pre + "ln2.gamma", layer.ln2_gamma, base),
                (pre + "ln2.beta", layer.ln2_beta, base),
            ])
        entries.extend([
            ("final_ln.gamma", self.final_gamma, base),
            ("final_ln.beta", self.final_beta, base),
            ("head.W", self.head_w, True),
            ("head.b", self.head_b, True),
        ])
        return entries

    def base_param_items(self) -> list[tuple[str, np.ndarray]]:
        """Everything that defines the frozen base: no adapters, no head."""
        items = [("embedding", self.embedding), ("pos_embedding", self.pos_embedding)]
        for i, layer in enumerate(self.layers):
            pre = f"layer{i}."
            for target in ATTENTION_TARGETS:
                items.append((f"{pre}attention.{target}.W0",
                              layer.projections[target].base._w0))
            items.extend([
                (pre + "ln1.gamma", layer.ln1_gamma),
                (pre + "ln1.beta", layer.ln1_beta),
                (pre + "ffn.W1", layer.ffn_w1),
                (pre + "ffn.b1", layer.ffn_b1),
                (pre + "ffn.W2", layer.ffn_w2),
                (pre + "ffn.b2", layer.ffn_b2),
                (pre + "ln2.gamma", layer.ln2_gamma),
                (pre + "ln2.beta", layer.ln2_beta),
            ])
        items.extend([("final_ln.gamma", self.final_gamma),
                      ("final_ln.beta", self.final_beta)])
        return items

    def extra_trainable_items(self) -> list[tuple[str, np.ndarray]]:
        """Task-owned trainable parameters outside the adapters."""
        return [("head.W", self.head_w), ("head.b", self.head_b)]

    def adapted_layers(self) -> list[tuple[int, str, AdaptedLinear]]:
        out = []
        for i, layer in enumerate(self.layers):
            for target in ATTENTION_TARGETS:
                lin = layer.projections[target]
                if lin.adapter is not None:
                    out.append((i, lin.base.name, lin))
        return out

    def attachable_targets(self) -> dict[str, AdaptedLinear]:
        return {lin.base.name: lin
                for layer in self.layers
                for lin in layer.projections.values()}

    def trainable_parameter_count(self) -> int:
        probe = Tape()
        _, arrays, trainset = register_leaves(probe, self.param_entries())
        return sum(arrays[k].size for k in trainset)

    def frozen_fingerprint(self) -> int:
        from .store import fingerprint_items

        return fingerprint_items(self.base_param_items())

    def clone(self) -> "AdaptedModel":
        return copy.deepcopy(self)

    # -- forward -----------------------------------------------------------

    def _mask(self, batch: int, seq_len: int) -> np.ndarray:
        key = (batch, seq_len)
        cached = self._mask_cache.get(key)
        if cached is None:
            block = np.repeat(np.arange(batch), seq_len)
            cached = np.where(block[:, None] == block[None, :], 0.0, -1e30)
            self._mask_cache[key] = cached
        return cached

    def _validate_tokens(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise ConfigError(f"token batch must be 2-D, got shape {tokens.shape}")
        if tokens.shape[1] > self.cfg.max_seq_len:
            raise ConfigError(
                f"sequence length {tokens.shape[1]} exceeds max_seq_len "
                f"{self.cfg.max_seq_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size):
            raise ConfigError(f"token id out of vocabulary ({self.cfg.vocab_size})")
        return tokens

    def forward_logits_node(self, tape: Tape, leaves: dict[str, Node],
                            tokens: np.ndarray,
                            dropout_rng: SeededRng | None = None) -> Node:
        tokens = self._validate_tokens(tokens)
        batch, seq_len = tokens.shape
        d = self.cfg.d_model
        heads = self.cfg.n_heads
        dh = d // heads
        ids = tokens.reshape(-1)
        pos_ids = np.tile(np.arange(seq_len), batch)
        x = tape.add(tape.embed(leaves["embedding"], ids),
                     tape.embed(leaves["pos_embedding"], pos_ids))
        mask = self._mask(batch, seq_len)
        for i, layer in enumerate(self.layers):
            pre = f"layer{i}."
            a_in = tape.layer_norm_cols(x, leaves[pre + "ln1.gamma"],
                                        leaves[pre + "ln1.beta"])
            proj = {}
            for target in ("query", "key", "value"):
                proj[target] = layer.projections[target].forward_node(
                    tape, a_in, leaves, f"{pre}attention.{target}.", dropout_rng)
            head_outs = []
            for h in range(heads):
                lo, hi = h * dh, (h + 1) * dh
                qh = tape.slice_rows(proj["query"], lo, hi)
                kh = tape.slice_rows(proj["key"], lo, hi)
                vh = tape.slice_rows(proj["value"], lo, hi)
                scores = tape.scale(tape.matmul(tape.transpose(kh), qh),
                                    1.0 / np.sqrt(dh))
                probs = tape.softmax_cols(tape.add_const(scores, mask))
                head_outs.append(tape.matmul(vh, probs))
            attn = tape.concat_rows(head_outs)
            attn = layer.projections["output"].forward_node(
                tape, attn, leaves, f"{pre}attention.output.", dropout_rng)
            x = tape.add(x, attn)
            f_in = tape.layer_norm_cols(x, leaves[pre + "ln2.gamma"],
                                        leaves[pre + "ln2.beta"])
            hidden = tape.gelu(tape.add_col(
                tape.matmul(leaves[pre + "ffn.W1"], f_in), leaves[pre + "ffn.b1"]))
            ffn = tape.add_col(tape.matmul(leaves[pre + "ffn.W2"], hidden),
                               leaves[pre + "ffn.b2"])
            x = tape.add(x, ffn)
        x = tape.layer_norm_cols(x, leaves["final_ln.gamma"], leaves["final_ln.beta"])
        pooled = tape.seq_mean_pool(x, seq_len)
        return tape.add_col(tape.matmul(leaves["head.W"], pooled), leaves["head.b"])

    def loss_node(self, tape: Tape, leaves: dict[str, Node], batch,
                  dropout_rng: SeededRng | None = None) -> Node:
        tokens, labels = batch
        logits = self.forward_logits_node(tape, leaves, tokens, dropout_rng)
        return tape.cross_entropy_cols(logits, labels)

    def logits(self, tokens: np.ndarray) -> Matrix:
        """Batch x n_classes logits (inference path, all leaves frozen).

        Large batches are evaluated in chunks: attention cost grows with
        the square of (chunk size * seq_len), so one huge forward would
        dominate everything else.
        """
        tokens = self._validate_tokens(np.asarray(tokens))
        chunk = 64
        outs = []
        for lo in range(0, tokens.shape[0], chunk):
            tape = Tape()
            leaves, _, _ = register_leaves(tape, self.param_entries(), freeze_all=True)
            node = self.forward_logits_node(tape, leaves, tokens[lo:lo + chunk])
            outs.append(node.value.T)
        return Matrix(np.concatenate(outs, axis=0))

    def metric_on(self, eval_set) -> float:
        tokens, labels = eval_set
        logits = self.logits(tokens).to_numpy()
        return float((logits.argmax(axis=1) == np.asarray(labels)).mean())


def build_model(cfg: TinyTransformerConfig) -> AdaptedModel:
    """Deterministically initialized base model for the given config."""
    return AdaptedModel(cfg)


def inject_adapters(model: AdaptedModel, policy: InjectionPolicy,
                    rng: SeededRng) -> AdaptedModel:
    """Copy of the model with adapters attached per the policy.

    Adapters start at the exact-zero update, so the copy's forward pass
    is identical to the original's. Layers are visited in order and
    targets in (query, key, value, output) order, making the draw
    sequence, and therefore the adapters, deterministic for a given rng.
    """
    out = model.clone()
    out.policy = policy
    if policy.kind == "none":
        return out
    d = model.cfg.d_model
    for layer in out.layers:
        layer_adapters: list[Adapter] = []
        for target in ATTENTION_TARGETS:
            if target not in policy.targets:
                continue
            lin = layer.projections[target]
            if lin.adapter is not None:
                raise ConfigError(f"{lin.base.name!r} already has an adapter")
            if policy.kind == "lora":
                adapter: Adapter = init_lora(d, d, policy.r, policy.alpha,
                                             policy.init_std, rng, policy.dropout)
            else:
                adapter = init_symlora(d, policy.r, policy.alpha,
                                       policy.init_std, rng, policy.dropout)
            lin.attach(adapter)
            layer_adapters.append(adapter)
        if policy.kind == "symlora" and policy.tie_lambda and len(layer_adapters) > 1:
            for extra in layer_adapters[1:]:
                extra.tie_lambda_to(layer_adapters[0])
    return out


def remove_adapters(model: AdaptedModel) -> AdaptedModel:
    """Copy of the model with every adapter detached; restores the exact
    base forward."""
    out = model.clone()
    out.policy = None
    for layer in out.layers:
        for lin in layer.projections.values():
            lin.detach()
    return out


def model_forward(model: AdaptedModel, token_batch: np.ndarray) -> Matrix:
    """Logits for a token batch, shape batch x n_classes."""
    return model.logits(token_batch)


def pretrain_base(model: AdaptedModel, task, steps: int, cfg=None) -> AdaptedModel:
    """Train every parameter on a task, then freeze the result.

    The returned model is the frozen "pretrained" base that fine-tuning
    runs adapt; its BaseLinear hashes are re-recorded after training.
    """
    from .training import TrainConfig, train

    if model.adapted_layers():
        raise ConfigError("pretrain_base expects a model without adapters")
    out = model.clone()
    if steps == 0:
        return out
    if cfg is None:
        cfg = TrainConfig(learning_rate=3e-3, batch_size=32, steps=steps,
                          seed=SeededRng(model.cfg.seed).spawn(7).seed,
                          eval_every=max(1, steps // 4))
    out.train_base = True
    try:
        train(out, task, cfg, invariant_checks=False)
    finally:
        out.train_base = False
    for layer in out.layers:
        for lin in layer.projections.values():
            lin.base.refreeze()
    return out


class LinearTaskModel:
    """A single adapted linear map, the probe for planted regression tasks.

    The frozen base is the task's own W0, so fine-tuning measures purely
    how well the adapter class can express the planted update.
    """

    def __init__(self, task, adapter_kind: str, r: int, alpha: float,
                 init_std: float = 0.02, seed: int = 0):
        if adapter_kind not in ADAPTER_KINDS:
            raise ConfigError(f"unknown adapter kind {adapter_kind!r}")
        base = BaseLinear(task.W0, layer_index=0, name="linear")
        adapter: Adapter | None = None
        rng = SeededRng(seed)
        if adapter_kind == "lora":
            adapter = init_lora(task.n, task.n, r, alpha, init_std, rng)
        elif adapter_kind == "symlora":
            adapter = init_symlora(task.n, r, alpha, init_std, rng)
        self.layer = AdaptedLinear(base, adapter)
        self.policy = InjectionPolicy(kind=adapter_kind, targets=("query",),
                                      r=r, alpha=alpha, init_std=init_std) \
            if adapter_kind != "none" else None

    def param_entries(self) -> list[tuple[str, np.ndarray, bool]]:
        return self.layer.param_specs("linear.")

    def base_param_items(self) -> list[tuple[str, np.ndarray]]:
        return [("linear.W0", self.layer.base._w0)]

    def extra_trainable_items(self) -> list[tuple[str, np.ndarray]]:
        return []

    def adapted_layers(self) -> list[tuple[int, str, AdaptedLinear]]:
        if self.layer.adapter is None:
            return []
        return [(0, self.layer.base.name, self.layer)]

    def attachable_targets(self) -> dict[str, AdaptedLinear]:
        return {self.layer.base.name: self.layer}

    def frozen_fingerprint(self) -> int:
        from .store import fingerprint_items

        return fingerprint_items(self.base_param_items())

    def clone(self) -> "LinearTaskModel":
        return copy.deepcopy(self)

    def loss_node(self, tape: Tape, leaves: dict[str, Node], batch,
                  dropout_rng: SeededRng | None = None) -> Node:
        x, y = batch
        pred = self.layer.forward_node(tape, tape.constant(x), leaves,
                                       "linear.", dropout_rng)
        diff = tape.sub(pred, tape.constant(y))
        return tape.mean(tape.mul(diff, diff))

    def metric_on(self, eval_set) -> float:
        x, y = eval_set
        tape = Tape()
        leaves, _, _ = register_leaves(tape, self.param_entries(), freeze_all=True)
        return float(self.loss_node(tape, leaves, (x, y)).value[0, 0])

    def realized_map(self) -> Matrix:
        return self.layer.realized_map()
