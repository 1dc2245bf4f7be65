"""Full descriptor network: equivariant backbone -> standardized map -> patch graph -> readout."""
from __future__ import annotations

import numpy as np

from . import numerics as nx
from .config import ModelConfig
from .equivariant import Backbone, BackboneConfig, FeatureField, GroupSpec
from .numerics import Tensor
from .patch_graph import (
    Activation,
    GcnLayer,
    PatchGrid,
    Readout,
    build_graph,
    descriptor_dim,
    gcn_propagate,
    init_super,
    partition,
    readout,
)

NORM_EPS = 1e-5


class EGSModel:
    """Shared two-view encoder plus a linear location classifier.

    Trainable tensors: ``backbone.*``, ``gnn.layer{l}.weight``,
    ``head.classifier.weight``. Buffers: ``norm.running_mean``,
    ``norm.running_var``, ``norm.count``.
    """

    def __init__(self, config: ModelConfig, num_classes: int):
        self.config = config
        self.num_classes = num_classes
        self.group = GroupSpec(config.group_order)
        self.backbone = Backbone(
            BackboneConfig(self.group, config.in_channels, tuple(config.widths),
                           config.kernel_size, tuple(config.downsample)),
            seed=config.seed,
        )
        self.grid = PatchGrid(config.grid, config.grid)
        self.graph = build_graph(self.grid, super_node=config.super_node)
        self.readout_mode = Readout(config.readout)
        rng = np.random.default_rng([config.seed, 1])
        width = self.backbone.config.out_channels
        hidden = config.gnn_hidden or width
        self.gnn: list[GcnLayer] = []
        d_in = width
        for layer in range(config.gnn_layers):
            last = layer == config.gnn_layers - 1
            bound = np.sqrt((3.0 if last else 6.0) / d_in)
            w = Tensor(rng.uniform(-bound, bound, (d_in, hidden)), requires_grad=True,
                       name=f"gnn.layer{layer}.weight")
            self.gnn.append(GcnLayer(w, Activation.IDENTITY if last else Activation.RELU))
            d_in = hidden
        self.descriptor_dim = descriptor_dim(self.grid, hidden, self.readout_mode, config.super_node)
        bound = 1.0 / np.sqrt(self.descriptor_dim)
        self.classifier = Tensor(rng.uniform(-bound, bound, (self.descriptor_dim, max(num_classes, 1))),
                                 requires_grad=True, name="head.classifier.weight")
        self.buffers = {
            "norm.running_mean": np.zeros(width, dtype=nx.default_dtype()),
            "norm.running_var": np.ones(width, dtype=nx.default_dtype()),
            "norm.count": np.zeros(1, dtype=nx.default_dtype()),
        }

    def parameters(self) -> dict[str, Tensor]:
        named = dict(self.backbone.parameters())
        for layer in self.gnn:
            named[layer.weight.name] = layer.weight
        named[self.classifier.name] = self.classifier
        return named

    def state(self) -> dict[str, np.ndarray]:
        """Every persistent array (parameters and buffers) by name."""
        out = {name: t.data for name, t in self.parameters().items()}
        out.update(self.buffers)
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        for name, arr in arrays.items():
            if name in params:
                params[name].data = arr.astype(params[name].data.dtype).reshape(params[name].shape)
            elif name in self.buffers:
                self.buffers[name] = arr.astype(self.buffers[name].dtype).reshape(self.buffers[name].shape)

    def _standardize(self, m: Tensor, train: bool) -> Tensor:
        """Per-channel standardization: batch statistics in training, frozen running ones at eval."""
        if not self.config.standardize:
            return m
        if train:
            y, batch_mean, batch_var = nx.standardize(m, axes=(0, 2, 3), eps=NORM_EPS)
            count = float(self.buffers["norm.count"][0])
            factor = max(self.config.norm_momentum, 1.0 / (count + 1.0))
            dt = self.buffers["norm.running_mean"].dtype
            self.buffers["norm.running_mean"] = (
                (1 - factor) * self.buffers["norm.running_mean"] + factor * batch_mean).astype(dt)
            self.buffers["norm.running_var"] = (
                (1 - factor) * self.buffers["norm.running_var"] + factor * batch_var).astype(dt)
            self.buffers["norm.count"] = self.buffers["norm.count"] + 1
            return y
        mean = self.buffers["norm.running_mean"].astype(m.dtype).reshape(1, -1, 1, 1)
        inv = (1.0 / np.sqrt(self.buffers["norm.running_var"].astype(m.dtype) + NORM_EPS)).reshape(1, -1, 1, 1)
        return nx.mul(nx.sub(m, Tensor(mean)), Tensor(inv))

    def feature_map(self, images, train: bool = False) -> Tensor:
        field = FeatureField.from_image(images, self.group)
        return self._standardize(self.backbone(field).planar(), train)

    def node_states(self, images, train: bool = False) -> Tensor:
        nodes = partition(self.feature_map(images, train), self.grid)
        H = init_super(nodes) if self.graph.has_super else nodes
        for layer in self.gnn:
            H = gcn_propagate(H, self.graph, layer)
        return H

    def descriptors(self, images, train: bool = False) -> Tensor:
        """Unit-norm retrieval descriptors, (B, descriptor_dim)."""
        return readout(self.node_states(images, train), self.graph, self.readout_mode)

    def logits(self, z: Tensor) -> Tensor:
        return nx.matmul(z, self.classifier)

    def embed(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        out = []
        with nx.no_grad():
            for start in range(0, len(images), batch_size):
                chunk = np.asarray(images[start:start + batch_size], dtype=nx.default_dtype())
                out.append(self.descriptors(chunk).data)
        if not out:
            return np.zeros((0, self.descriptor_dim), dtype=nx.default_dtype())
        return np.concatenate(out, axis=0)
