import numpy as np
import pytest

from egs import numerics as nx
from egs.equivariant import Backbone, BackboneConfig, FeatureField, GroupSpec, encode
from egs.errors import DimensionError, DomainError, GeometryError
from egs.numerics import Tensor, grad_check
from egs.oracles import brute_propagate
from egs.patch_graph import (
    Activation,
    GcnLayer,
    PatchGrid,
    Readout,
    aggregate,
    build_graph,
    gcn_propagate,
    graph_from_adjacency,
    init_super,
    partition,
    readout,
)


def random_graph(rng, n):
    A = (rng.random((n, n)) < 0.3).astype(float)
    A = np.triu(A, 1)
    A = A + A.T + np.eye(n)
    return graph_from_adjacency(A)


def test_partition_examples():
    m = np.arange(8.0).reshape(1, 2, 2, 2)
    nodes = partition(Tensor(m), PatchGrid(2, 2)).data
    assert np.array_equal(nodes[0], m[0].reshape(2, 4).T)
    const = np.full((1, 3, 8, 8), 1.5)
    np.testing.assert_allclose(partition(Tensor(const), PatchGrid()).data, 1.5)


def test_partition_rotation_permutes_nodes(rng):
    m = rng.normal(size=(2, 3, 8, 8))
    grid = PatchGrid()
    base = partition(Tensor(m), grid).data
    for k in range(4):
        rot = partition(Tensor(np.rot90(m, k, axes=(-2, -1)).copy()), grid).data
        assert np.abs(rot - base[:, grid.rotation_permutation(k)]).max() <= 1e-6


def test_partition_errors():
    with pytest.raises(GeometryError):
        partition(Tensor(np.ones((1, 1, 6, 6))), PatchGrid(4, 4))
    with pytest.raises(GeometryError):
        PatchGrid(2, 3)


def test_build_graph_degrees():
    g = build_graph(PatchGrid(2, 2))
    assert g.size == 5 and g.degrees.tolist() == [4, 4, 4, 4, 5]
    g = build_graph(PatchGrid(1, 1))
    assert g.degrees.tolist() == [2, 2]
    g = build_graph(PatchGrid(4, 4))
    deg = g.degrees[:16].reshape(4, 4)
    assert deg[1:3, 1:3].tolist() == [[6, 6], [6, 6]]
    assert {deg[0, 0], deg[0, 3], deg[3, 0], deg[3, 3]} == {4}
    assert deg[0, 1] == deg[1, 0] == deg[3, 2] == deg[2, 3] == 5
    assert g.degrees[16] == 17
    A = g.adjacency
    assert np.array_equal(A, A.T) and np.all(np.diag(A) == 1)
    assert np.all(A[16] == 1) and np.all(A[:, 16] == 1)


def test_plain_grid_has_no_super():
    g = build_graph(PatchGrid(), super_node=False)
    assert g.size == 16 and not g.has_super
    with pytest.raises(DomainError):
        readout(Tensor(np.ones((16, 3))), g, Readout.SUPER_ONLY)


def test_graph_from_adjacency_validation():
    with pytest.raises(DomainError):
        graph_from_adjacency([[1, 1], [0, 1]])
    with pytest.raises(DomainError):
        graph_from_adjacency(np.zeros((2, 2)))


def test_init_super_examples(rng):
    out = init_super(Tensor(np.array([[1.0], [2.0], [3.0], [4.0]]))).data
    assert out[-1, 0] == 2.5
    assert np.all(init_super(Tensor(np.full((5, 2), 3.0))).data[-1] == 3.0)
    x = rng.normal(size=(16, 4))
    perm = rng.permutation(16)
    assert np.abs(init_super(Tensor(x)).data[-1] - init_super(Tensor(x[perm])).data[-1]).max() <= 1e-6


def test_propagate_examples():
    g = graph_from_adjacency(np.ones((2, 2)))
    out = gcn_propagate(Tensor(np.array([[2.0], [4.0]])), g, GcnLayer(Tensor(np.eye(1)), Activation.IDENTITY))
    assert out.data.tolist() == [[3.0], [3.0]]
    g1 = graph_from_adjacency(np.ones((1, 1)))
    H = np.array([[1.5, -2.0]])
    assert np.array_equal(gcn_propagate(Tensor(H), g1, GcnLayer(Tensor(np.eye(2)), Activation.IDENTITY)).data, H)
    zero = gcn_propagate(Tensor(np.ones((17, 3))), build_graph(PatchGrid()), GcnLayer(Tensor(np.zeros((3, 2)))))
    assert not zero.data.any()


def test_propagate_row_mismatch():
    with pytest.raises(DimensionError):
        aggregate(Tensor(np.ones((5, 2))), build_graph(PatchGrid()))


def test_sum_conservation(rng):
    for n in range(1, 21):
        g = random_graph(rng, n)
        H = rng.normal(size=(n, 3))
        out = gcn_propagate(Tensor(H), g, GcnLayer(Tensor(np.eye(3)), Activation.IDENTITY)).data
        np.testing.assert_allclose(out.sum(axis=0), H.sum(axis=0), atol=1e-5)


def test_permutation_equivariance(rng, f64):
    g = build_graph(PatchGrid())
    layer = GcnLayer(Tensor(rng.normal(size=(4, 5))), Activation.RELU)
    H = rng.normal(size=(17, 4))
    base = gcn_propagate(Tensor(H), g, layer).data
    for _ in range(10):
        perm = rng.permutation(17)
        out = gcn_propagate(Tensor(H[perm]), g.permuted(perm), layer).data
        assert np.abs(out - base[perm]).max() <= 1e-6


def test_dense_matches_brute_force_exactly(rng, f64):
    for n in range(1, 21):
        g = random_graph(rng, n)
        H, W = rng.normal(size=(n, 3)), rng.normal(size=(3, 2))
        for act in Activation:
            got = gcn_propagate(Tensor(H), g, GcnLayer(Tensor(W), act)).data
            assert np.array_equal(got, brute_propagate(H, g.adjacency, W, act is Activation.RELU))


def test_readout_modes(rng):
    g = build_graph(PatchGrid())
    H = Tensor(rng.normal(size=(17, 3)))
    assert np.array_equal(readout(H, g, "super_only", normalize=False).data, H.data[16])
    z = readout(H, g, "concat")
    assert z.shape == (17 * 3,)
    for mode in Readout:
        assert abs(np.linalg.norm(readout(H, g, mode).data) - 1.0) <= 1e-6


def test_pipeline_rotation_invariance():
    grid = PatchGrid()
    g = build_graph(grid)
    with nx.precision("f64"):
        bb = Backbone(BackboneConfig(GroupSpec(4), 3, (4, 6), 3, (2, 2)), seed=2)
        rng = np.random.default_rng(5)
        layers = [GcnLayer(Tensor(rng.normal(size=(6, 6))), Activation.RELU),
                  GcnLayer(Tensor(rng.normal(size=(6, 6))), Activation.IDENTITY)]

        def describe(img):
            m = encode(FeatureField.from_image(img), bb).planar()
            H = init_super(partition(m, grid))
            for layer in layers:
                H = gcn_propagate(H, g, layer)
            return readout(H, g).data

        for trial in range(5):
            img = rng.random((1, 3, 16, 16))
            z = describe(img)
            for k in range(4):
                zr = describe(np.rot90(img, k, axes=(-2, -1)).copy())
                assert np.abs(zr - z).max() <= 1e-4 * np.abs(z).max()


def test_graph_stage_gradients(rng, f64):
    grid = PatchGrid(2, 2)
    g = build_graph(grid)
    m = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True, name="map")
    W0 = Tensor(rng.normal(size=(3, 4)), requires_grad=True, name="w0")
    W1 = Tensor(rng.normal(size=(4, 4)), requires_grad=True, name="w1")
    probe = Tensor(rng.normal(size=(2, 4)))

    def f():
        H = init_super(partition(m, grid))
        H = gcn_propagate(H, g, GcnLayer(W0, Activation.RELU))
        H = gcn_propagate(H, g, GcnLayer(W1, Activation.IDENTITY))
        return nx.sum(nx.mul(readout(H, g), probe))

    report = grad_check(f, [m, W0, W1])
    assert report.worst <= 1e-4, report.max_rel_error
