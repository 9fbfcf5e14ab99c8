import itertools

import numpy as np
import pytest

from relchain.autodiff import ShapeError, Tensor, no_grad, ops
from relchain.egnn import (
    VARIANTS,
    EgnnModel,
    GraphBatch,
    aggregate,
    build_batch,
    encode_graph,
    message,
    readout,
    update,
)
from relchain.gradcheck import check_function, fixture_instances
from relchain.kb import NUM_EDGE_TYPES, NUM_TARGETS, Relation, default_kb
from relchain.story import DatasetConfig, StoryInstance, make_instance

R = Relation


def small(variant, **kw):
    kw.setdefault("heads", 2 if variant == "gat" else 1)
    return EgnnModel(variant, emb_dim=kw.pop("emb_dim", 8), seed=kw.pop("seed", 3), **kw)


def logits_of(model, batch):
    with no_grad():
        return model.logits(batch).data


def chain(facts, query, k):
    target = default_kb().resolve_chain([r for _, r, _ in facts[:k]])
    return StoryInstance(tuple(facts), query, target, k)


FIVE = chain([(0, R("father"), 1), (1, R("sister"), 2), (2, R("son"), 3), (3, R("wife"), 4)], (0, 4), 4)


class TestMessage:
    def test_identity_theta(self):
        out = message(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0, 0.0]]), np.eye(2))
        np.testing.assert_array_equal(out.data, [[1, 0, 0, 1, 0]])

    def test_width(self, rng):
        assert message(rng.normal(size=(5, 4)), np.zeros((5, 3)), rng.normal(size=(4, 4))).shape == (5, 7)

    def test_zero_edge_attribute(self, rng):
        x, theta = rng.normal(size=(3, 4)), rng.normal(size=(4, 4))
        out = message(x, np.zeros((3, 3)), theta).data
        np.testing.assert_allclose(out[:, :4], x @ theta)
        assert not out[:, 4:].any()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            message(np.zeros((2, 3)), np.zeros((2, 2)), np.eye(2))


class TestAggregate:
    @pytest.mark.parametrize("mode", ["sum", "mean", "max"])
    def test_permutation_invariant(self, mode, rng):
        msgs = rng.normal(size=(9, 4))
        dst = rng.integers(0, 3, size=9)
        base = aggregate(msgs, dst, 4, mode).data
        for _ in range(5):
            p = rng.permutation(9)
            np.testing.assert_array_equal(aggregate(msgs[p], dst[p], 4, mode).data, base)

    def test_mean(self):
        out = aggregate(np.array([[2.0, 0.0], [0.0, 2.0]]), [0, 0], 1, "mean")
        np.testing.assert_array_equal(out.data, [[1.0, 1.0]])

    @pytest.mark.parametrize("mode", ["sum", "mean", "max"])
    def test_isolated_node_is_zero(self, mode, rng):
        out = aggregate(rng.normal(size=(4, 3)), [0, 0, 2, 2], 3, mode).data
        assert not out[1].any()

    def test_no_messages(self):
        assert not aggregate(np.zeros((0, 3)), np.zeros(0, dtype=int), 2, "max").data.any()

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            aggregate(np.zeros((1, 2)), [0], 1, "median")


class TestUpdate:
    def test_width(self, rng):
        out = update(rng.normal(size=(4, 6)), rng.normal(size=(4, 9)), rng.normal(size=(9, 6)),
                     rng.normal(size=(6, 6)), np.zeros(6))
        assert out.shape == (4, 6)

    def test_zero_aggregate_leaves_self_term(self, rng):
        x, root = rng.normal(size=(3, 4)), rng.normal(size=(4, 4))
        u = np.vstack([np.eye(4), np.zeros((3, 4))])
        out = update(x, np.zeros((3, 7)), u, root, np.zeros(4), activation="none")
        np.testing.assert_allclose(out.data, x @ root)

    def test_gradient_wrt_update_matrix(self, rng):
        x, agg, root = rng.normal(size=(5, 4)), rng.normal(size=(5, 7)), rng.normal(size=(4, 4))
        for act in ("relu", "tanh"):
            err, _ = check_function(lambda u: update(x, agg, u, root, None, act), [rng.normal(size=(7, 4))], rng)
            assert err <= 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            update(np.zeros((2, 4)), np.zeros((2, 5)), np.zeros((7, 4)))


class TestBatch:
    def test_edges_in_both_directions(self):
        batch = build_batch([FIVE])
        assert len(batch.src) == 2 * len(FIVE.facts)
        assert batch.edge_attr.shape == (8, NUM_EDGE_TYPES)
        pairs = set(zip(batch.src.tolist(), batch.dst.tolist()))
        assert all((d, s) in pairs for s, d in pairs)

    def test_query_outside_mask(self):
        batch = build_batch([FIVE], pad_to=7)
        batch.query_index = np.array([[0, 6]])
        with pytest.raises(ShapeError):
            small("gcn").logits(batch)

    def test_too_many_nodes(self):
        with pytest.raises(ShapeError):
            build_batch([FIVE], pad_to=31)


class TestEncode:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_shapes_and_masked_nodes_zero(self, variant):
        model = small(variant)
        batch = build_batch(fixture_instances(), pad_to=6)
        nodes = encode_graph(model, batch).data
        assert nodes.shape == (batch.num_nodes, 8)
        assert not nodes[~batch.node_mask.reshape(-1)].any()
        assert readout(model, encode_graph(model, batch), batch).shape == (2, NUM_TARGETS)

    def test_star_graph_locality(self):
        star = StoryInstance(((0, R("son"), 1), (0, R("son"), 2), (0, R("daughter"), 3)), (1, 3), None, 2)
        model = small("gcn", layers=1)
        batch = build_batch([star])
        before = encode_graph(model, batch).data.copy()
        model.slot_emb.data[1] += 1.0
        after = encode_graph(model, batch).data
        changed = np.abs(after - before).max(axis=1) > 1e-12
        assert changed.tolist() == [True, True, False, False]
        model.slot_emb.data[1] -= 1.0
        for leaf in (1, 2, 3):
            model.slot_emb.data[leaf] += 1.0
        assert np.abs(encode_graph(model, batch).data[0] - before[0]).max() > 1e-12

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_relabeling_equivariance(self, variant):
        model = small(variant)
        base_batch = build_batch([FIVE])
        with no_grad():
            base_nodes = model.encode_graph(base_batch).data
        base = logits_of(model, base_batch)
        perms = list(itertools.permutations(range(5)))
        if variant != "gcn":
            perms = perms[::17]
        for pi in perms:
            facts = tuple((pi[x], r, pi[y]) for x, r, y in FIVE.facts)
            moved = StoryInstance(facts, (pi[0], pi[4]), FIVE.target, FIVE.k)
            batch = build_batch([moved])
            batch.slots[0, list(pi)] = np.arange(5)  # node pi[i] keeps the slot of node i
            with no_grad():
                nodes = model.encode_graph(batch).data
            np.testing.assert_allclose(nodes[list(pi)], base_nodes, atol=1e-9)
            np.testing.assert_allclose(logits_of(model, batch), base, atol=1e-9)

    @pytest.mark.parametrize("variant", VARIANTS)
    @pytest.mark.parametrize("aggregation", ["sum", "mean"])
    def test_edge_reordering(self, variant, aggregation, rng):
        model = small(variant, aggregation=aggregation)
        instances = [make_instance(DatasetConfig(), "test", k, 0) for k in (2, 4, 6)]
        batch = build_batch(instances)
        base = logits_of(model, batch)
        for _ in range(4):
            p = rng.permutation(len(batch.src))
            shuffled = GraphBatch(batch.slots, batch.node_mask, batch.src[p], batch.dst[p],
                                  batch.edge_type[p], batch.query_index, batch.labels)
            assert np.abs(logits_of(model, shuffled) - base).max() <= 1e-9

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_padding_neutral(self, variant):
        model = small(variant)
        inst = make_instance(DatasetConfig(), "test", 3, 1)
        alone = logits_of(model, build_batch([inst]))
        padded = logits_of(model, build_batch([inst], pad_to=20))
        big = make_instance(DatasetConfig(), "test", 8, 1)
        mixed = logits_of(model, build_batch([inst, big]))
        assert np.abs(padded - alone).max() <= 1e-9
        assert np.abs(mixed[:1] - alone).max() <= 1e-9

    def test_rgcn_with_equal_weights_is_gcn(self, rng):
        d = 6
        gcn, rgcn = small("gcn", emb_dim=d, layers=2), small("rgcn", emb_dim=d, layers=2, seed=9)
        state = gcn.state_dict()
        shared = {k: v for k, v in state.items() if ".theta." not in k and not k.endswith(".u")}
        rgcn_state = dict(shared)
        for i in range(2):
            w = rng.normal(size=(d, d))
            state[f"layer{i}.theta.0"] = np.eye(d)
            state[f"layer{i}.u"] = np.vstack([w, np.zeros((NUM_EDGE_TYPES, d))])
            for t in range(NUM_EDGE_TYPES):
                rgcn_state[f"layer{i}.rel.{t}"] = w
        gcn.load_state_dict(state)
        rgcn.load_state_dict(rgcn_state)
        batch = build_batch([FIVE] + fixture_instances())
        np.testing.assert_allclose(logits_of(rgcn, batch), logits_of(gcn, batch), atol=1e-12)


class TestReadout:
    def test_width_for_default_embedding(self):
        model = EgnnModel("gcn")
        batch = build_batch(fixture_instances())
        with no_grad():
            feats = model.readout_features(model.encode_graph(batch), batch)
        assert feats.shape == (2, 300)

    def test_gathers_query_rows(self, rng):
        model = small("gat")
        batch = build_batch(fixture_instances(), pad_to=5)
        nodes = rng.normal(size=(batch.num_nodes, 8)) * batch.node_mask.reshape(-1, 1)
        feats = model.readout_features(Tensor(nodes), batch).data
        per_graph = nodes.reshape(2, 5, 8)
        for g, (h, t) in enumerate(batch.query_index):
            np.testing.assert_array_equal(feats[g, 8:16], per_graph[g, h])
            np.testing.assert_array_equal(feats[g, 16:], per_graph[g, t])
            np.testing.assert_allclose(feats[g, :8], per_graph[g][batch.node_mask[g]].mean(axis=0))

    def test_zero_weights_uniform(self):
        model = small("agnn")
        model.readout_w.data[:] = 0.0
        probs = ops.softmax(model.logits(build_batch(fixture_instances()))).data
        np.testing.assert_allclose(probs, 1.0 / NUM_TARGETS)


class TestModel:
    def test_layer_widths_constant(self):
        for variant in VARIANTS:
            model = small(variant, layers=3)
            for name, value in model.named_parameters().items():
                if name.endswith((".root", ".bias")):
                    assert value.shape[-1] == 8

    def test_sgcn_shares_parameters(self):
        assert {n.split(".")[0] for n in small("sgcn", layers=4).named_parameters()} \
            == {"slot_emb", "layer0", "readout"}

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            EgnnModel("gin")

    def test_seeded_init_is_reproducible(self):
        a, b = small("gat", seed=5), small("gat", seed=5)
        for (na, pa), (nb, pb) in zip(a.named_parameters().items(), b.named_parameters().items()):
            assert na == nb and np.array_equal(pa.data, pb.data)
