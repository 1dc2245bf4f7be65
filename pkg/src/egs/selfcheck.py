"""Property suites behind ``egs selfcheck``.

Every check is a small function that raises ``AssertionError`` on failure and
returns a short detail string (usually the worst error seen). The whole run is
sized to finish in well under five minutes on one CPU core.
"""
from __future__ import annotations

import contextlib
import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import equivariant as eq
from . import numerics as nx
from .data import AugmentationConfig, Sample, SyntheticSceneSpec, augment, generate_synthetic, hflip
from .numerics import Tensor, grad_check
from .objectives import cross_entropy, infonce
from .oracles import brute_metrics, brute_propagate, naive_matmul
from .patch_graph import (
    Activation,
    GcnLayer,
    PatchGrid,
    build_graph,
    gcn_propagate,
    graph_from_adjacency,
    init_super,
    partition,
    readout,
)
from .retrieval import METRIC_NAMES, GalleryIndex, decode_embeddings, encode_embeddings, evaluate, rank
from .trainer import Checkpoint, LrGroups, OptimizerState, sgd_step

KNOWN_FAULTS = ("rotation",)


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str
    seconds: float


_REGISTRY: list[tuple[str, str, Callable[[], str]]] = []


def check(suite: str, name: str):
    def deco(fn):
        _REGISTRY.append((suite, name, fn))
        return fn
    return deco


def _unit_rows(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# --- numerics -------------------------------------------------------------

@check("numerics", "ordered matmul equals naive loop bitwise")
def _ordered_matmul():
    rng = np.random.default_rng(0)
    with nx.precision("f64"):
        for _ in range(20):
            a, b = rng.normal(size=(4, 9)), rng.normal(size=(9, 3))
            assert np.array_equal(nx.matmul(a, b, ordered=True).data, naive_matmul(a, b))
    return "20 cases"


@check("numerics", "grad_check on every op (rel err <= 1e-4)")
def _grad_ops():
    rng = np.random.default_rng(1)
    worst = 0.0
    with nx.precision("f64"):
        def p(*shape):
            return Tensor(rng.normal(size=shape), requires_grad=True)

        x, y, w = p(3, 4), p(4, 2), p(2, 3, 3, 3)
        img = p(1, 3, 6, 6)
        probe = {}

        def red(t):
            key = t.shape
            probe.setdefault(key, Tensor(rng.normal(size=key)))
            return nx.sum(nx.mul(t, probe[key]))

        z = Tensor(rng.choice([-1, 1], size=(3, 4)) * rng.uniform(0.1, 1, (3, 4)), requires_grad=True)
        cases = [
            (lambda: red(nx.matmul(x, y, ordered=True)), [x, y]),
            (lambda: red(nx.relu(z)), [z]),
            (lambda: red(nx.l2norm(x)), [x]),
            (lambda: red(nx.log_softmax(x)), [x]),
            (lambda: red(nx.standardize(x, axes=(0,))[0]), [x]),
            (lambda: red(nx.concat([x, nx.mean(x, axis=0, keepdims=True)], axis=0)), [x]),
            (lambda: red(nx.conv2d(img, w)), [img, w]),
            (lambda: red(nx.avg_pool2d(img, 2)), [img]),
            (lambda: red(nx.roll(nx.rot90(img, 1), 1, axis=1)), [img]),
        ]
        for f, params in cases:
            worst = max(worst, grad_check(f, params).worst)
    assert worst <= 1e-4, f"worst rel err {worst:.2e}"
    return f"worst {worst:.1e}"


# --- equivariance ---------------------------------------------------------

def _lift_error(prec: str, trials: int) -> float:
    worst = 0.0
    with nx.precision(prec):
        for t in range(trials):
            rng = np.random.default_rng([t, 11])
            x = eq.FeatureField.from_image(rng.normal(size=(1, 2, 8, 8)))
            k1 = eq.GroupKernel(Tensor(rng.normal(size=(3, 2, 3, 3))), eq.GroupSpec(4), lifting=True)
            k2 = eq.GroupKernel(Tensor(rng.normal(size=(2, 3, 4, 3, 3))), eq.GroupSpec(4), lifting=False)

            def net(f):
                h = eq.lift_conv(f, k1)
                return eq.group_conv(eq.FeatureField(nx.relu(h.data), h.group), k2)

            base = net(x)
            for r in range(4):
                d = net(eq.rotate_field(x, r)).data.data - eq.rotate_field(base, r).data.data
                worst = max(worst, float(np.abs(d).max()))
    return worst


@check("equivariance", "lift + group conv commute with rotation (f32 <= 1e-5)")
def _equi_f32():
    worst = _lift_error("f32", 25)
    assert worst <= 1e-5, f"max abs err {worst:.2e}"
    return f"max abs err {worst:.1e}"


@check("equivariance", "lift + group conv commute with rotation (f64 <= 1e-10)")
def _equi_f64():
    worst = _lift_error("f64", 25)
    assert worst <= 1e-10, f"max abs err {worst:.2e}"
    return f"max abs err {worst:.1e}"


@check("equivariance", "rotate_field group laws")
def _group_laws():
    rng = np.random.default_rng(2)
    f = eq.FeatureField(Tensor(rng.normal(size=(1, 2, 4, 5, 5))), eq.GroupSpec(4))
    g = f
    for _ in range(4):
        g = eq.rotate_field(g, 1)
    assert np.array_equal(g.data.data, f.data.data), "r^4 != identity"
    two = eq.rotate_field(eq.rotate_field(f, 1), 1).data.data
    assert np.array_equal(two, eq.rotate_field(f, 2).data.data), "r o r != r^2"
    return "identity, composition"


@check("equivariance", "invariant pooling is rotation invariant")
def _pool_invariance():
    rng = np.random.default_rng(3)
    f = eq.FeatureField(Tensor(rng.normal(size=(1, 2, 4, 6, 6))), eq.GroupSpec(4))
    base = eq.invariant_pool(f).data.data
    for r in range(4):
        d = eq.invariant_pool(eq.rotate_field(f, r)).data.data - np.rot90(base, r, axes=(-2, -1))
        assert np.abs(d).max() <= 1e-6, f"r={r}: {np.abs(d).max():.2e}"
    return "4 elements"


@check("equivariance", "encode commutes with image rotation")
def _encode():
    with nx.precision("f64"):
        bb = eq.Backbone(eq.BackboneConfig(eq.GroupSpec(4), 3, (4, 4), 3, (2, 2)), seed=0)
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(5):
            x = rng.random((1, 3, 16, 16))
            base = eq.encode(eq.FeatureField.from_image(x), bb).data.data
            for k in range(4):
                rot = eq.encode(eq.FeatureField.from_image(eq.rotate_image(x, k)), bb).data.data
                worst = max(worst, float(np.abs(rot - np.rot90(base, k, axes=(-2, -1))).max()))
    assert worst <= 1e-10, f"max abs err {worst:.2e}"
    return f"max abs err {worst:.1e}"


# --- patch graph ----------------------------------------------------------

def _random_graph(rng, n):
    A = np.triu((rng.random((n, n)) < 0.3).astype(float), 1)
    return graph_from_adjacency(A + A.T + np.eye(n))


@check("patch_graph", "dense propagation equals brute-force loop exactly")
def _gcn_oracle():
    rng = np.random.default_rng(5)
    with nx.precision("f64"):
        for n in range(1, 21):
            g = _random_graph(rng, n)
            H, W = rng.normal(size=(n, 3)), rng.normal(size=(3, 2))
            for act in Activation:
                got = gcn_propagate(Tensor(H), g, GcnLayer(Tensor(W), act)).data
                assert np.array_equal(got, brute_propagate(H, g.adjacency, W, act is Activation.RELU)), f"n={n}"
    return "40 graphs"


@check("patch_graph", "sum conservation (column-stochastic)")
def _sum_conservation():
    rng = np.random.default_rng(6)
    worst = 0.0
    for n in range(1, 21):
        g = _random_graph(rng, n)
        H = rng.normal(size=(n, 3))
        out = gcn_propagate(Tensor(H), g, GcnLayer(Tensor(np.eye(3)), Activation.IDENTITY)).data
        worst = max(worst, float(np.abs(out.sum(0) - H.sum(0)).max()))
    assert worst <= 1e-5, f"{worst:.2e}"
    return f"max err {worst:.1e}"


@check("patch_graph", "permutation equivariance")
def _perm():
    rng = np.random.default_rng(7)
    g = build_graph(PatchGrid())
    layer = GcnLayer(Tensor(rng.normal(size=(4, 4))), Activation.RELU)
    with nx.precision("f64"):
        H = rng.normal(size=(17, 4))
        base = gcn_propagate(Tensor(H), g, layer).data
        for _ in range(10):
            perm = rng.permutation(17)
            d = gcn_propagate(Tensor(H[perm]), g.permuted(perm), layer).data - base[perm]
            assert np.abs(d).max() <= 1e-6
    return "10 permutations"


@check("patch_graph", "descriptor is invariant to quarter turns")
def _pipeline_invariance():
    grid = PatchGrid()
    g = build_graph(grid)
    worst = 0.0
    with nx.precision("f64"):
        bb = eq.Backbone(eq.BackboneConfig(eq.GroupSpec(4), 3, (4, 6), 3, (2, 2)), seed=1)
        rng = np.random.default_rng(8)
        layers = [GcnLayer(Tensor(rng.normal(size=(6, 6))), Activation.RELU),
                  GcnLayer(Tensor(rng.normal(size=(6, 6))), Activation.IDENTITY)]

        def describe(img):
            H = init_super(partition(eq.encode(eq.FeatureField.from_image(img), bb).planar(), grid))
            for layer in layers:
                H = gcn_propagate(H, g, layer)
            return readout(H, g).data

        for _ in range(5):
            img = rng.random((1, 3, 16, 16))
            z = describe(img)
            for k in range(1, 4):
                worst = max(worst, float(np.abs(describe(eq.rotate_image(img, k)) - z).max()))
    assert worst <= 1e-4, f"{worst:.2e}"
    return f"max err {worst:.1e}"


# --- objectives -----------------------------------------------------------

@check("objectives", "closed forms")
def _closed_forms():
    with nx.precision("f64"):
        E = np.eye(2)
        a = infonce(Tensor(E), Tensor(E), 1.0).item()
        b = cross_entropy(Tensor(np.zeros((2, 4))), [0, 3]).item()
    assert abs(a - math.log(1 + math.exp(-1))) <= 1e-6, a
    assert abs(b - math.log(4)) <= 1e-7, b
    return f"infonce {a:.5f}, ce {b:.5f}"


@check("objectives", "symmetry, scale and shift invariance, monotonicity")
def _loss_props():
    rng = np.random.default_rng(9)
    with nx.precision("f64"):
        for _ in range(10):
            u, v = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
            U, V = Tensor(_unit_rows(u)), Tensor(_unit_rows(v))
            val = infonce(U, V).item()
            assert abs(val - infonce(V, U).item()) <= 1e-7
            assert abs(val - infonce(nx.l2norm(Tensor(3.7 * u)), nx.l2norm(Tensor(3.7 * v))).item()) <= 1e-6
            L = rng.normal(size=(5, 6))
            c = cross_entropy(Tensor(L), [0, 1, 2, 3, 4]).item()
            assert abs(c - cross_entropy(Tensor(L + 5.0), [0, 1, 2, 3, 4]).item()) <= 1e-6
        S = rng.uniform(-1, 1, (4, 4))
        t = np.arange(4)

        def nce(S):
            s = Tensor(S / 0.1)
            return 0.5 * (cross_entropy(s, t).item() + cross_entropy(nx.transpose(s, (1, 0)), t).item())

        before = nce(S)
        S[1, 1] += 0.05
        assert nce(S) < before
    return "10 batches"


@check("objectives", "loss gradients (rel err <= 1e-4)")
def _loss_grads():
    rng = np.random.default_rng(10)
    with nx.precision("f64"):
        U = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        V = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        L = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        labels = [0, 2, 1, 1]
        worst = grad_check(lambda: nx.add(infonce(nx.l2norm(U), nx.l2norm(V), 0.5), cross_entropy(L, labels)),
                           [U, V, L]).worst
    assert worst <= 1e-4, f"{worst:.2e}"
    return f"worst {worst:.1e}"


# --- retrieval ------------------------------------------------------------

@check("retrieval", "metrics equal brute-force oracle exactly")
def _metrics_oracle():
    for trial in range(30):
        r = np.random.default_rng([trial, 12])
        M, n, k = int(r.integers(5, 51)), int(r.integers(1, 51)), int(r.integers(2, 8))
        gids = r.integers(0, k, size=M)
        gids[:k] = np.arange(k)
        G, Q = _unit_rows(r.normal(size=(M, 4))), _unit_rows(r.normal(size=(n, 4)))
        qids = r.integers(0, k, size=n)
        got = evaluate(Q, qids, GalleryIndex(G, gids)).per_query
        ref = brute_metrics(Q, qids, G, gids)
        for name in METRIC_NAMES:
            assert got[name] == ref[name], f"trial {trial} {name}"
    return "30 instances"


@check("retrieval", "recall ordering and orthogonal invariance")
def _retrieval_props():
    rng = np.random.default_rng(13)
    G = _unit_rows(rng.normal(size=(300, 6)))
    gids = np.arange(300) % 30
    Q = _unit_rows(rng.normal(size=(20, 6)))
    p = evaluate(Q, np.arange(20), GalleryIndex(G, gids)).per_query
    for i in range(20):
        assert p["R@1"][i] <= p["R@5"][i] <= p["R@10"][i]
    R, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    a, b = rank(Q[0], GalleryIndex(G, gids)), rank(R @ Q[0], GalleryIndex(G @ R.T, gids))
    assert np.array_equal(a.order, b.order)
    return "ok"


@check("retrieval", "EGSE round trip")
def _egse():
    rng = np.random.default_rng(14)
    E = _unit_rows(rng.normal(size=(5, 3))).astype(np.float32)
    blob = encode_embeddings(np.arange(5), E)
    ids, back = decode_embeddings(blob)
    assert np.array_equal(back, E) and encode_embeddings(ids, back) == blob
    return f"{len(blob)} bytes"


# --- data -----------------------------------------------------------------

@check("data", "augmentation identity, involution, determinism")
def _augment():
    rng = np.random.default_rng(15)
    s = Sample(rng.random((3, 16, 16)), 0, "drone")
    off = AugmentationConfig(rotate90=False, hflip=False, crop_fraction=1.0)
    assert np.array_equal(augment(s, off, np.random.default_rng(0)).image, s.image)
    assert np.array_equal(hflip(hflip(s.image)), s.image)
    cfg = AugmentationConfig()
    assert np.array_equal(augment(s, cfg, np.random.default_rng(5)).image,
                          augment(s, cfg, np.random.default_rng(5)).image)
    return "ok"


@check("data", "synthetic generator is deterministic")
def _synthetic():
    spec = SyntheticSceneSpec(classes=2, side=32, seed=7, drone_train=1, drone_test=1)
    with tempfile.TemporaryDirectory() as tmp:
        a, b = Path(tmp, "a"), Path(tmp, "b")
        generate_synthetic(spec, a)
        generate_synthetic(spec, b)
        files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
        for f in files:
            assert (a / f).read_bytes() == (b / f).read_bytes(), str(f)
    return f"{len(files)} files"


# --- trainer --------------------------------------------------------------

@check("trainer", "sgd closed forms")
def _sgd():
    with nx.precision("f64"):
        p = {"gnn.w": Tensor([0.0])}
        st = OptimizerState(LrGroups(1.0, 1.0), 0.9, 0.0)
        for _ in range(2):
            sgd_step(p, {"gnn.w": np.array([1.0])}, st)
        assert abs(p["gnn.w"].data[0] + 2.9) < 1e-12
        p = {"gnn.w": Tensor([2.0])}
        sgd_step(p, {"gnn.w": np.array([0.0])}, OptimizerState(LrGroups(1.0, 1.0), 0.0, 0.5))
        assert p["gnn.w"].data[0] == 1.0
    return "ok"


@check("trainer", "checkpoint round trip is byte-identical")
def _ckpt():
    rng = np.random.default_rng(16)
    ck = Checkpoint({"a": rng.normal(size=(3, 2)).astype(np.float32)}, 5, {"x": 1})
    blob = ck.to_bytes()
    assert Checkpoint.from_bytes(blob).to_bytes() == blob
    return f"{len(blob)} bytes"


# --- runner ---------------------------------------------------------------

@contextlib.contextmanager
def injected(faults):
    """Temporarily switch on named faults (self-test of the suite itself)."""
    unknown = set(faults) - set(KNOWN_FAULTS)
    if unknown:
        raise ValueError(f"unknown fault(s): {sorted(unknown)}")
    saved = set(eq._FAULTS)
    eq._FAULTS.update(faults)
    try:
        yield
    finally:
        eq._FAULTS.clear()
        eq._FAULTS.update(saved)


def run(faults=(), report: Callable[[CheckResult], None] | None = None) -> list[CheckResult]:
    results = []
    with injected(faults):
        for suite, name, fn in _REGISTRY:
            t0 = time.perf_counter()
            try:
                detail, ok = fn(), True
            except AssertionError as exc:
                detail, ok = str(exc) or "assertion failed", False
            res = CheckResult(suite, name, ok, detail, time.perf_counter() - t0)
            results.append(res)
            if report is not None:
                report(res)
    return results
