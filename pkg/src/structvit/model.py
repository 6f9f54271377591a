"""The assembled network: backbone plus structure injection plus feature
assembly, with a flat named-parameter registry for the optimizer and
checkpoints."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import (AttentionRecord, EncoderParams, LayerParams, PatchGrid,
                       embed, encoder_layer, split_patches)
from .boosting import classify
from .errors import ConfigError
from .structure import GcnParams, inject, structure_vector

INIT_STD = 0.02
TRUNC_BOUND = 2.0  # in units of the std


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) with resampling outside +-2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > TRUNC_BOUND * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > TRUNC_BOUND * std
    return out


@dataclass(frozen=True)
class Architecture:
    """Everything needed to rebuild the parameter tensors."""

    image_size: int = 64
    patch_size: int = 16
    stride: int = 16
    depth: int = 4
    width: int = 64
    heads: int = 4
    ffn_width: int = 256
    n_classes: int = 8
    sil_layer_count: int = 3
    mfb_enabled: bool = True
    gcn_hidden: int = 0  # 0 means same as width
    share_gcn_weights: bool = False

    def validate(self) -> None:
        if self.width % self.heads != 0:
            raise ConfigError(f"width {self.width} not divisible by {self.heads} heads")
        if not (0 <= self.sil_layer_count <= 3):
            raise ConfigError(f"sil_layer_count must be 0..3, got {self.sil_layer_count}")
        if self.sil_layer_count > self.depth:
            raise ConfigError(
                f"sil_layer_count {self.sil_layer_count} exceeds depth {self.depth}"
            )
        if self.mfb_enabled and self.depth < 3:
            raise ConfigError("multi-level fusion needs at least 3 layers")
        if self.n_classes < 2:
            raise ConfigError("need at least 2 classes")

    @property
    def sil_layers(self) -> tuple[int, ...]:
        """1-based indices of the structure-equipped layers (the last k)."""
        k = self.sil_layer_count
        return tuple(range(self.depth - k + 1, self.depth + 1))

    @property
    def feature_width(self) -> int:
        return 3 * self.width if self.mfb_enabled else self.width


@dataclass
class ForwardPass:
    """Everything the trainer needs from one image."""

    feature: Tensor  # (1, feature_width)
    records: dict[int, AttentionRecord] = field(default_factory=dict)
    structure_features: dict[int, Tensor] = field(default_factory=dict)


class StructViT:
    """Parameter owner and single-image forward pass.

    One instance is exclusive to a training thread; read-only inference
    may share loaded parameters across threads since forward never
    mutates them.
    """

    def __init__(self, arch: Architecture, rng: np.random.Generator | None = None):
        arch.validate()
        self.arch = arch
        self.grid = PatchGrid.from_sizes(arch.image_size, arch.image_size,
                                         arch.patch_size, arch.stride)
        self.params: dict[str, Tensor] = {}
        rng = rng or np.random.default_rng(0)
        self._build(rng)

    def _param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        return t

    def _build(self, rng: np.random.Generator) -> None:
        a = self.arch
        d, n = a.width, self.grid.n
        in_dim = 3 * a.patch_size * a.patch_size
        patch_w = self._param("patch_proj.w", trunc_normal(rng, (in_dim, d)))
        patch_b = self._param("patch_proj.b", np.zeros(d))
        cls_token = self._param("cls_token", np.zeros((1, d)))
        pos_embed = self._param("pos_embed", trunc_normal(rng, (n + 1, d)))
        layers = []
        for k in range(1, a.depth + 1):
            pre = f"layers.{k}"
            layers.append(LayerParams(
                wq=self._param(f"{pre}.attn.wq", trunc_normal(rng, (d, d))),
                bq=self._param(f"{pre}.attn.bq", np.zeros(d)),
                wk=self._param(f"{pre}.attn.wk", trunc_normal(rng, (d, d))),
                bk=self._param(f"{pre}.attn.bk", np.zeros(d)),
                wv=self._param(f"{pre}.attn.wv", trunc_normal(rng, (d, d))),
                bv=self._param(f"{pre}.attn.bv", np.zeros(d)),
                wo=self._param(f"{pre}.attn.wo", trunc_normal(rng, (d, d))),
                bo=self._param(f"{pre}.attn.bo", np.zeros(d)),
                ln1_gamma=self._param(f"{pre}.ln1.gamma", np.ones(d)),
                ln1_beta=self._param(f"{pre}.ln1.beta", np.zeros(d)),
                ffn_w1=self._param(f"{pre}.ffn.w1", trunc_normal(rng, (d, a.ffn_width))),
                ffn_b1=self._param(f"{pre}.ffn.b1", np.zeros(a.ffn_width)),
                ffn_w2=self._param(f"{pre}.ffn.w2", trunc_normal(rng, (a.ffn_width, d))),
                ffn_b2=self._param(f"{pre}.ffn.b2", np.zeros(d)),
                ln2_gamma=self._param(f"{pre}.ln2.gamma", np.ones(d)),
                ln2_beta=self._param(f"{pre}.ln2.beta", np.zeros(d)),
            ))
        self.encoder = EncoderParams(patch_w, patch_b, cls_token, pos_embed,
                                     layers, a.heads)
        d_h = a.gcn_hidden or d
        self.gcn: dict[int, GcnParams] = {}
        if a.sil_layer_count > 0:
            if a.share_gcn_weights:
                shared = GcnParams(
                    w1=self._param("gcn.shared.w1", trunc_normal(rng, (4, d_h))),
                    w2=self._param("gcn.shared.w2", trunc_normal(rng, (d_h, d))),
                )
                self.gcn = {k: shared for k in a.sil_layers}
            else:
                for k in a.sil_layers:
                    self.gcn[k] = GcnParams(
                        w1=self._param(f"gcn.{k}.w1", trunc_normal(rng, (4, d_h))),
                        w2=self._param(f"gcn.{k}.w2", trunc_normal(rng, (d_h, d))),
                    )
        self.head_w = self._param("head.w", trunc_normal(rng, (a.feature_width, a.n_classes)))
        self.head_b = self._param("head.b", np.zeros(a.n_classes))

    # ------------------------------------------------------------------
    def forward_image(self, patches, capture_layers: set[int] | None = None) -> ForwardPass:
        """Run all layers on one image's patch matrix.

        After each structure-equipped layer the structure feature is added
        to the cls row before the next layer consumes it. The returned
        feature is the concatenation of the last three layers' cls rows
        (post-injection) when fusion is on, else the final cls row alone.
        """
        a = self.arch
        sil = set(a.sil_layers)
        capture = sil | (capture_layers or set())
        z = embed(patches, self.encoder)
        records: dict[int, AttentionRecord] = {}
        structure_feats: dict[int, Tensor] = {}
        cls_rows: dict[int, Tensor] = {}
        fuse_from = a.depth - 2
        for k in range(1, a.depth + 1):
            z, record = encoder_layer(z, self.encoder.layers[k - 1], a.heads, k,
                                      capture=k in capture)
            if record is not None:
                records[k] = record
            if k in sil:
                s = structure_vector(records[k], self.grid, self.gcn[k])
                structure_feats[k] = s
                z = inject(z, s)
            if a.mfb_enabled and k >= fuse_from:
                cls_rows[k] = ad.slice_rows(z, 0, 1)
        if a.mfb_enabled:
            feature = ad.concat_last_axis([cls_rows[k] for k in sorted(cls_rows)])
        else:
            feature = ad.slice_rows(z, 0, 1)
        wanted = sil | (capture_layers or set())
        return ForwardPass(feature, {k: r for k, r in records.items() if k in wanted},
                           structure_feats)

    def forward_image_array(self, image: np.ndarray,
                            capture_layers: set[int] | None = None) -> ForwardPass:
        return self.forward_image(split_patches(image, self.grid), capture_layers)

    def logits_for(self, features: list[Tensor]):
        return classify(features, self.head_w, self.head_b)

    def predict(self, patches) -> int:
        with ad.no_grad():
            fp = self.forward_image(patches)
            logits, _ = self.logits_for([fp.feature])
        return int(logits.data[0].argmax())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) - set(state)
            extra = set(state) - set(self.params)
            raise ConfigError(f"parameter names mismatch: missing={sorted(missing)} "
                              f"extra={sorted(extra)}")
        for name, arr in state.items():
            t = self.params[name]
            if t.shape != arr.shape:
                raise ConfigError(f"{name}: shape {arr.shape} != expected {t.shape}")
            t.data = np.ascontiguousarray(arr, dtype=np.float64)

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}
