"""Fusion classifiers over multi-channel time-series inputs.

Five variants share one skeleton: a per-channel convolutional encoder feeding
either a plain mean fusion (baseline) or a gated weighted sum whose weights
come from a dedicated FC layer over the concatenated features. The gated
regularized variants add one auxiliary classifier head per channel and extra
loss terms that teach the fusion weights to discount unreliable channels.

variant            fusion    aux paths  loss
baseline           mean      no         main
netgated           gated     no         main
argate_ws          gated     yes        main + alpha * sum(aux)
argate_plus        gated     yes        main + alpha * sum(w*aux) + beta * sum((w - t)^2), fixed t
argate_l           gated     yes        same, with t learned by a lattice network
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Parameter,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    concatenate,
    conv1d,
    matmul,
    maxpool1d,
    mean_reduce,
    multiply,
    narrow,
    negate,
    relu,
    reshape,
    sigmoid,
    softmax,
    softmax_cross_entropy,
    square,
    stop_gradient,
    sum_reduce,
)
from .monotonic import LatticeNetwork, dln_eval

VARIANTS = ("baseline", "netgated", "argate_ws", "argate_plus", "argate_l")
GATED_VARIANTS = ("netgated", "argate_ws", "argate_plus", "argate_l")
AUX_VARIANTS = ("argate_ws", "argate_plus", "argate_l")


class NaNLossError(RuntimeError):
    """Raised when a loss term turns non-finite; names the offending term."""


@dataclass
class ModelConfig:
    variant: str
    n_channels: int
    n_classes: int
    input_length: int
    feature_dim: int = 64
    conv_channels: tuple[int, int] = (16, 32)
    kernel: int = 5
    pool: int = 2
    fc_con_dim: int = 128
    head_hidden: int = 128
    aux_hidden: int = 64
    alpha: float = 0.3
    beta: float = 1.0
    lattice: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.n_channels < 1:
            raise ValueError(f"need at least one channel, got {self.n_channels}")
        if self.variant in GATED_VARIANTS and self.n_channels < 2:
            raise ValueError(f"{self.variant} needs at least 2 channels to gate")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"alpha and beta must be non-negative, got {self.alpha}, {self.beta}")

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["conv_channels"] = list(self.conv_channels)
        d["lattice"] = dict(self.lattice)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "conv_channels" in d:
            d["conv_channels"] = tuple(d["conv_channels"])
        return cls(**d)


def _conv_out_length(cfg: ModelConfig) -> int:
    length = cfg.input_length
    for _ in cfg.conv_channels:
        length = length - cfg.kernel + 1
        if length < cfg.pool:
            raise ShapeError(
                f"input length {cfg.input_length} too short for "
                f"kernel {cfg.kernel} / pool {cfg.pool} stack"
            )
        length //= cfg.pool
    return length


def _glorot(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class FusionModel:
    """One fusion classifier; holds parameters and runs tape-recorded passes.

    Encoders are grouped convolutions, one group per channel, so every
    channel is processed independently by an identically shaped stack. Aux
    paths read the same encoder outputs (weight sharing is structural: the
    parameters are literally the same objects).
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        cfg = config
        rng = np.random.default_rng(cfg.seed)
        K = cfg.n_channels
        c1, c2 = cfg.conv_channels
        self.flat_dim = c2 * _conv_out_length(cfg)
        self.params: dict[str, Parameter] = {}

        def par(name, array):
            p = Parameter(array, name=name)
            self.params[name] = p
            return p

        kernel = cfg.kernel
        self.w_conv1 = par("enc/conv1/w", _glorot(rng, (K * c1, 1, kernel), kernel, c1 * kernel))
        self.b_conv1 = par("enc/conv1/b", np.zeros((K * c1, 1)))
        self.w_conv2 = par("enc/conv2/w", _glorot(rng, (K * c2, c1, kernel), c1 * kernel, c2 * kernel))
        self.b_conv2 = par("enc/conv2/b", np.zeros((K * c2, 1)))
        self.w_enc_fc = par(
            "enc/fc/w", _glorot(rng, (K, self.flat_dim, cfg.feature_dim), self.flat_dim, cfg.feature_dim)
        )
        self.b_enc_fc = par("enc/fc/b", np.zeros((K, cfg.feature_dim)))

        F = cfg.feature_dim
        C = cfg.n_classes
        if cfg.variant == "baseline":
            h = cfg.head_hidden
            self.w_head1 = par("head/fc1/w", _glorot(rng, (F, h), F, h))
            self.b_head1 = par("head/fc1/b", np.zeros(h))
            self.w_head2 = par("head/fc2/w", _glorot(rng, (h, C), h, C))
            self.b_head2 = par("head/fc2/b", np.zeros(C))
        else:
            g = cfg.fc_con_dim
            self.w_gate1 = par("gate/fc_con/w", _glorot(rng, (K * F, g), K * F, g))
            self.b_gate1 = par("gate/fc_con/b", np.zeros(g))
            self.w_gate2 = par("gate/logits/w", _glorot(rng, (g, K), g, K))
            self.b_gate2 = par("gate/logits/b", np.zeros(K))
            h = cfg.head_hidden
            self.w_head1 = par("head/fc1/w", _glorot(rng, (F, h), F, h))
            self.b_head1 = par("head/fc1/b", np.zeros(h))
            self.w_head2 = par("head/fc2/w", _glorot(rng, (h, C), h, C))
            self.b_head2 = par("head/fc2/b", np.zeros(C))

        if cfg.variant in AUX_VARIANTS:
            a = cfg.aux_hidden
            self.w_aux1 = par("aux/fc1/w", _glorot(rng, (K, F, a), F, a))
            self.b_aux1 = par("aux/fc1/b", np.zeros((K, a)))
            self.w_aux2 = par("aux/fc2/w", _glorot(rng, (K, a, C), a, C))
            self.b_aux2 = par("aux/fc2/b", np.zeros((K, C)))

        self.lattice_net = None
        if cfg.variant == "argate_l":
            lat_cfg = dict(cfg.lattice)
            self.lattice_net = LatticeNetwork(
                k=K,
                n_keypoints=lat_cfg.get("n_keypoints", 5),
                embed_dim=lat_cfg.get("embed_dim"),
                lattice_vertices=lat_cfg.get("lattice_vertices", 2),
                seed=lat_cfg.get("seed", cfg.seed),
                name="target",
            )
            for p in self.lattice_net.parameters():
                self.params[p.name] = p

    # ------------------------------------------------------------ parameter sets

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def main_parameters(self) -> list[Parameter]:
        """Parameters consulted at inference: encoders, gate, head."""
        return [p for name, p in self.params.items() if not name.startswith(("aux/", "target/"))]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # ----------------------------------------------------------------- encoders

    def _check_input(self, x) -> Tensor:
        xt = x if isinstance(x, Tensor) else Tensor(x)
        K, L = self.config.n_channels, self.config.input_length
        if xt.ndim != 3 or xt.shape[1] != K or xt.shape[2] != L:
            raise ShapeError(
                f"expected input (batch, {K}, {L}), got {xt.shape}; "
                f"every channel of the configured set must be present"
            )
        return xt

    def encode(self, x) -> Tensor:
        """Per-channel features, shape (batch, K, F)."""
        xt = self._check_input(x)
        cfg = self.config
        K = cfg.n_channels
        B = xt.shape[0]
        h = conv1d(xt, self.w_conv1.tensor(), groups=K)
        h = relu(add(h, _tile_channel_bias(self.b_conv1.tensor(), K, cfg.conv_channels[0])))
        h = maxpool1d(h, width=cfg.pool)
        h = conv1d(h, self.w_conv2.tensor(), groups=K)
        h = relu(add(h, _tile_channel_bias(self.b_conv2.tensor(), K, cfg.conv_channels[1])))
        h = maxpool1d(h, width=cfg.pool)
        feats = []
        per = self.flat_dim
        c2 = cfg.conv_channels[1]
        for k in range(K):
            hk = reshape(narrow(h, 1, k * c2, c2), (B, per))
            wk = reshape(narrow(self.w_enc_fc.tensor(), 0, k, 1), (per, cfg.feature_dim))
            bk = reshape(narrow(self.b_enc_fc.tensor(), 0, k, 1), (1, cfg.feature_dim))
            feats.append(reshape(relu(add(matmul(hk, wk), bk)), (B, 1, cfg.feature_dim)))
        return concatenate(feats, axis=1)

    # ------------------------------------------------------------------- fusion

    def extract_fusion_weights(self, features: Tensor) -> Tensor:
        """Gating weights from concatenated features: FC-con -> K logits ->
        sigmoid -> softmax. Shape (batch, K); rows sum to 1."""
        cfg = self.config
        if cfg.variant not in GATED_VARIANTS:
            raise ValueError(f"variant {cfg.variant!r} has no fusion weights")
        B, K, F = features.shape
        flat = reshape(features, (B, K * F))
        hidden = relu(add(matmul(flat, self.w_gate1.tensor()), self.b_gate1.tensor()))
        logits = add(matmul(hidden, self.w_gate2.tensor()), self.b_gate2.tensor())
        return softmax(sigmoid(logits), axis=1)

    def _head(self, fused: Tensor) -> Tensor:
        hidden = relu(add(matmul(fused, self.w_head1.tensor()), self.b_head1.tensor()))
        return add(matmul(hidden, self.w_head2.tensor()), self.b_head2.tensor())

    def _weighted_fuse(self, features: Tensor, weights: Tensor) -> Tensor:
        B, K, F = features.shape
        w3 = reshape(weights, (B, K, 1))
        return sum_reduce(multiply(features, w3), axis=1)

    # ----------------------------------------------------------------- forwards

    def forward_baseline(self, x) -> Tensor:
        features = self.encode(x)
        fused = mean_reduce(features, axis=1)
        return self._head(fused)

    def forward_netgated(self, x, *, forced_weights=None) -> tuple[Tensor, Tensor]:
        features = self.encode(x)
        weights = (
            as_tensor(forced_weights)
            if forced_weights is not None
            else self.extract_fusion_weights(features)
        )
        logits = self._head(self._weighted_fuse(features, weights))
        return logits, weights

    def forward_argate(self, x, *, forced_weights=None) -> tuple[Tensor, Tensor, Tensor]:
        """Main logits, fusion weights, and per-channel aux logits (B, K, C)."""
        if self.config.variant not in AUX_VARIANTS:
            raise ValueError(f"variant {self.config.variant!r} has no auxiliary paths")
        features = self.encode(x)
        weights = (
            as_tensor(forced_weights)
            if forced_weights is not None
            else self.extract_fusion_weights(features)
        )
        logits = self._head(self._weighted_fuse(features, weights))

        cfg = self.config
        B, K, F = features.shape
        aux = []
        for k in range(K):
            fk = reshape(narrow(features, 1, k, 1), (B, F))
            w1 = reshape(narrow(self.w_aux1.tensor(), 0, k, 1), (F, cfg.aux_hidden))
            b1 = reshape(narrow(self.b_aux1.tensor(), 0, k, 1), (1, cfg.aux_hidden))
            w2 = reshape(narrow(self.w_aux2.tensor(), 0, k, 1), (cfg.aux_hidden, cfg.n_classes))
            b2 = reshape(narrow(self.b_aux2.tensor(), 0, k, 1), (1, cfg.n_classes))
            hk = relu(add(matmul(fk, w1), b1))
            aux.append(reshape(add(matmul(hk, w2), b2), (B, 1, cfg.n_classes)))
        return logits, weights, concatenate(aux, axis=1)

    def forward(self, x):
        """Variant-appropriate forward; always returns (logits, weights|None)."""
        if self.config.variant == "baseline":
            return self.forward_baseline(x), None
        if self.config.variant == "netgated":
            return self.forward_netgated(x)
        logits, weights, _ = self.forward_argate(x)
        return logits, weights

    # ------------------------------------------------------------------- losses

    def training_loss(self, x, labels) -> tuple[Tensor, dict]:
        """Scalar batch loss plus a detail dict of term values."""
        cfg = self.config
        labels = np.asarray(labels)
        if cfg.variant == "baseline":
            logits = self.forward_baseline(x)
            main = mean_reduce(softmax_cross_entropy(logits, labels))
            _check_finite(main, "main loss")
            return main, {"main": float(main.data)}
        if cfg.variant == "netgated":
            logits, _ = self.forward_netgated(x)
            main = mean_reduce(softmax_cross_entropy(logits, labels))
            _check_finite(main, "main loss")
            return main, {"main": float(main.data)}

        logits, weights, aux_logits = self.forward_argate(x)
        B, K, C = aux_logits.shape
        main_losses = softmax_cross_entropy(logits, labels)
        aux_losses = concatenate(
            [
                reshape(
                    softmax_cross_entropy(reshape(narrow(aux_logits, 1, k, 1), (B, C)), labels),
                    (B, 1),
                )
                for k in range(K)
            ],
            axis=1,
        )  # (B, K) per-example auxiliary losses

        targets = None
        if cfg.variant == "argate_l":
            targets = fusion_target_lattice(aux_losses, self.lattice_net)
        elif cfg.variant == "argate_plus":
            targets = fusion_target_fixed(aux_losses)
        return total_loss(main_losses, aux_losses, weights, targets, cfg, return_details=True)

    # -------------------------------------------------------------- persistence

    def save(self, path, *, inference_only: bool = True) -> None:
        """Write a checkpoint; by default only the main-model parameters
        (aux heads and the target network train the gate, they are not
        consulted at inference)."""
        from .autodiff import save_parameters

        params = self.main_parameters() if inference_only else self.parameters()
        save_parameters(path, params)

    def load(self, path) -> None:
        from .autodiff import load_parameters

        load_parameters(path, self.main_parameters())
        extras = [p for p in self.parameters() if p not in self.main_parameters()]
        if extras:
            load_parameters(path, extras, strict=False)


def _tile_channel_bias(bias: Tensor, groups: int, per_group: int) -> Tensor:
    """(groups*per_group, 1) bias broadcast over batch and length axes."""
    return reshape(bias, (1, groups * per_group, 1))


def _check_finite(value: Tensor, term: str) -> None:
    if not np.isfinite(value.data).all():
        raise NaNLossError(f"non-finite value in {term}")


# ----------------------------------------------------------------- targets

def fusion_target_fixed(aux_losses) -> Tensor:
    """Per-example weight targets from the auxiliary losses alone.

    t = softmax(sigmoid(exp(-loss^2))) along the channel axis. Lower loss
    gives strictly larger target; everything is detached, targets carry no
    gradient. Accepts (K,) or (batch, K).
    """
    losses = aux_losses.data if isinstance(aux_losses, Tensor) else np.asarray(aux_losses, dtype=np.float64)
    single = losses.ndim == 1
    if single:
        losses = losses[None, :]
    u = np.exp(-np.square(losses))
    s = 1.0 / (1.0 + np.exp(-u))
    e = np.exp(s - s.max(axis=1, keepdims=True))
    t = e / e.sum(axis=1, keepdims=True)
    return Tensor(t[0] if single else t)


def fusion_target_lattice(aux_losses, net: LatticeNetwork) -> Tensor:
    """Learned per-example weight targets.

    The auxiliary losses are detached, squashed to u = exp(-loss^2) in
    (0, 1], mapped through the monotone lattice network, and softmax
    normalized so the targets sum to 1. Target k never increases in its own
    auxiliary loss; the network's parameters do receive gradient.
    """
    losses = aux_losses.data if isinstance(aux_losses, Tensor) else np.asarray(aux_losses, dtype=np.float64)
    single = losses.ndim == 1
    if single:
        losses = losses[None, :]
    u = np.exp(-np.square(losses))
    raw = dln_eval(net, u)
    out = softmax(raw, axis=1)
    if single:
        out = reshape(out, (net.k,))
    return out


def total_loss(main_losses, aux_losses, w_fusion, targets, config, *, return_details=False):
    """Batch training loss for the gated regularized variants.

    loss = mean(main) + alpha * mean(sum_k w_k * aux_k)
                      + beta * mean(sum_k (w_k - t_k)^2)

    argate_ws drops the beta term and weighs the auxiliary losses equally
    (no w factor). The fusion weights are detached inside the alpha term so
    that term trains the encoders/aux heads, never the gate; the beta term
    is the only shaper of the weights. Fixed targets are already detached;
    learned targets propagate into the lattice network only.
    """
    cfg = config
    main = mean_reduce(main_losses)
    _check_finite(main, "main loss")
    detail = {"main": float(main.data)}
    loss = main

    if cfg.variant == "argate_ws":
        aux = mean_reduce(sum_reduce(aux_losses, axis=1))
        _check_finite(aux, "auxiliary loss")
        detail["aux"] = float(aux.data)
        loss = add(loss, multiply(aux, cfg.alpha))
        detail["total"] = float(loss.data)
        return (loss, detail) if return_details else loss

    w_const = stop_gradient(w_fusion)
    aux = mean_reduce(sum_reduce(multiply(w_const, aux_losses), axis=1))
    _check_finite(aux, "weighted auxiliary loss")
    detail["aux"] = float(aux.data)
    loss = add(loss, multiply(aux, cfg.alpha))

    if targets is not None and cfg.beta > 0:
        gap = add(w_fusion, negate(targets))
        reg = mean_reduce(sum_reduce(square(gap), axis=1))
        _check_finite(reg, "weight-target term")
        detail["target"] = float(reg.data)
        loss = add(loss, multiply(reg, cfg.beta))

    _check_finite(loss, "total loss")
    detail["total"] = float(loss.data)
    return (loss, detail) if return_details else loss


def count_parameters(params) -> int:
    return int(sum(p.value.size for p in params))


def inference_parameter_count(config: ModelConfig) -> int:
    """Main-model (inference-side) tunable parameter count for a config."""
    return count_parameters(FusionModel(config).main_parameters())


def balanced_baseline_config(gated: ModelConfig) -> ModelConfig:
    """Baseline config whose inference parameter count matches a gated
    variant within 5%, balanced via the head width."""
    probe = ModelConfig(**{**gated.to_dict(), "variant": "netgated"})
    target = inference_parameter_count(probe)
    base = ModelConfig(**{**gated.to_dict(), "variant": "baseline"})
    enc = count_parameters(
        [p for p in FusionModel(base).main_parameters() if p.name.startswith("enc/")]
    )
    F, C = gated.feature_dim, gated.n_classes
    # head params = F*h + h + h*C + C; solve for h.
    h = max(1, round((target - enc - C) / (F + 1 + C)))
    return ModelConfig(**{**gated.to_dict(), "variant": "baseline", "head_hidden": int(h)})
