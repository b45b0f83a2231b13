import numpy as np
import pytest

from molmatch.encoder import EncoderParams, GraphBatch, encode_multilevel, gin_layer
from molmatch.smiles import DEFAULT_SCHEMA, graph_from_smiles
from molmatch.tensor import Tensor, backward, mul, sum_all
from oracles import assert_grads_match, fd_gradients

MOLS = ["CCO", "c1ccccc1", "CC(=O)O", "C", "N#Cc1ccccc1"]


def small_params(seed=0, layers=2, hidden=5):
    return EncoderParams.init(layers, hidden, seed=seed)


class TestInit:
    def test_shapes_and_flags(self):
        params = small_params(hidden=7, layers=3)
        assert params.n_layers == 3 and params.hidden == 7
        tensors = params.tensors()
        assert tensors["input_w"].shape == (DEFAULT_SCHEMA.d_atom, 7)
        assert tensors["layer0.bond_embed"].shape == (DEFAULT_SCHEMA.d_bond, 7)
        assert tensors["layer1.eps"].shape == ()
        assert all(t.requires_grad for t in tensors.values())

    def test_seeded_init_is_deterministic(self):
        a, b = small_params(seed=9), small_params(seed=9)
        for name, t in a.tensors().items():
            np.testing.assert_array_equal(t.values, b.tensors()[name].values)

    def test_eps_starts_at_zero(self):
        params = small_params()
        assert all(lp.eps.values == 0.0 for lp in params.layers)

    def test_init_bounds_follow_fan_in(self):
        params = EncoderParams.init(1, 64, seed=0)
        w1 = params.layers[0].w1.values
        assert np.abs(w1).max() <= 1.0 / np.sqrt(64)

    def test_replace_values_is_functional(self):
        params = small_params()
        new = params.replace_values({"input_b": np.ones(5)})
        assert new.input_b is not params.input_b
        np.testing.assert_array_equal(new.input_b.values, np.ones(5))
        assert params.input_b.values.sum() != 5.0  # original untouched

    def test_detach_shares_values_without_grad(self):
        params = small_params()
        frozen = params.detach()
        assert frozen.input_w.values is params.input_w.values
        assert not any(t.requires_grad for t in frozen.tensors().values())

    def test_validation(self):
        with pytest.raises(ValueError):
            EncoderParams.init(0, 5)
        with pytest.raises(ValueError):
            EncoderParams.init(2, 0)


class TestGraphBatch:
    def test_directed_edge_expansion(self):
        batch = GraphBatch([graph_from_smiles("CCO")])
        assert batch.n_atoms == 3 and batch.n_edges == 4  # 2 bonds, both directions
        pairs = set(zip(batch.edge_src.tolist(), batch.edge_dst.tolist()))
        assert pairs == {(0, 1), (1, 0), (1, 2), (2, 1)}

    def test_offsets_across_molecules(self):
        batch = GraphBatch([graph_from_smiles("CC"), graph_from_smiles("CC")])
        assert batch.mol_ids.tolist() == [0, 0, 1, 1]
        assert batch.edge_src.min() >= 0 and batch.edge_src.max() == 3

    def test_bond_free_batch(self):
        batch = GraphBatch([graph_from_smiles("C"), graph_from_smiles("[NH4+]")])
        assert batch.n_edges == 0 and batch.edge_feats is None

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            GraphBatch([])


def identity_mlp_params(hidden):
    """One layer whose MLP is the identity on positive inputs and whose
    input projection maps every atom to the all-ones vector."""
    params = EncoderParams.init(1, hidden, seed=0)
    eye = np.eye(hidden)
    return params.replace_values(
        {
            "input_w": np.zeros((DEFAULT_SCHEMA.d_atom, hidden)),
            "input_b": np.ones(hidden),
            "layer0.w1": eye,
            "layer0.b1": np.zeros(hidden),
            "layer0.w2": eye,
            "layer0.b2": np.zeros(hidden),
            "layer0.eps": np.array(0.5),
            "layer0.bond_embed": np.full((DEFAULT_SCHEMA.d_bond, hidden), 0.25),
        }
    )


class TestGinLayer:
    def test_self_term_scales_by_one_plus_eps(self):
        # an isolated atom sees only (1 + eps) * h through the identity MLP
        params = identity_mlp_params(4)
        out = encode_multilevel([graph_from_smiles("C")], params)[0]
        np.testing.assert_allclose(out.values, np.full((1, 4), 1.5), rtol=1e-14)

    def test_neighbour_sum_with_bond_vector(self):
        # two bonded atoms: each gets 1.5*1 + (1*1 + 0.25) = 2.75
        params = identity_mlp_params(4)
        out = encode_multilevel([graph_from_smiles("CC")], params)[0]
        np.testing.assert_allclose(out.values, np.full((1, 4), 2.75), rtol=1e-14)

    def test_zero_weights_zero_output(self):
        params = small_params()
        zeros = {name: np.zeros(t.shape) for name, t in params.tensors().items()}
        silenced = params.replace_values(zeros)
        levels = encode_multilevel([graph_from_smiles(s) for s in MOLS], silenced)
        for z in levels:
            np.testing.assert_array_equal(z.values, np.zeros(z.shape))

    def test_layer_index_range(self):
        params = small_params()
        batch = GraphBatch([graph_from_smiles("CC")])
        h = Tensor(np.zeros((2, 5)))
        with pytest.raises(ValueError, match="out of range"):
            gin_layer(h, batch, params, 2)


class TestEncodeMultilevel:
    def test_output_shapes(self):
        params = small_params(layers=3, hidden=6)
        levels = encode_multilevel([graph_from_smiles(s) for s in MOLS], params)
        assert len(levels) == 3
        assert all(z.shape == (len(MOLS), 6) for z in levels)
        assert all(np.isfinite(z.values).all() for z in levels)

    def test_batch_invariance(self):
        # joint encoding must match each molecule encoded alone
        params = small_params(layers=2, hidden=8, seed=3)
        graphs = [graph_from_smiles(s) for s in MOLS]
        joint = encode_multilevel(graphs, params)
        for i, g in enumerate(graphs):
            alone = encode_multilevel([g], params)
            for layer in range(2):
                np.testing.assert_allclose(
                    joint[layer].values[i], alone[layer].values[0], rtol=1e-12, atol=1e-12
                )

    def test_atom_order_invariance(self):
        # the same molecule written with different atom orders pools identically
        params = small_params(layers=2, hidden=8, seed=1)
        pairs = [("CCO", "OCC"), ("C(F)(Cl)Br", "FC(Cl)Br"), ("c1ccncc1", "n1ccccc1")]
        for left, right in pairs:
            za = encode_multilevel([graph_from_smiles(left)], params)
            zb = encode_multilevel([graph_from_smiles(right)], params)
            for a, b in zip(za, zb):
                np.testing.assert_allclose(a.values, b.values, rtol=1e-10, atol=1e-12)

    def test_dropout_only_in_training(self):
        params = small_params(seed=2)
        graphs = [graph_from_smiles("CCO")]
        clean = encode_multilevel(graphs, params)
        eval_mode = encode_multilevel(
            graphs, params, training=False, dropout_rate=0.5, rng=np.random.default_rng(0)
        )
        train_mode = encode_multilevel(
            graphs, params, training=True, dropout_rate=0.5, rng=np.random.default_rng(0)
        )
        np.testing.assert_array_equal(clean[0].values, eval_mode[0].values)
        assert not np.array_equal(clean[0].values, train_mode[0].values)

    def test_accepts_prebuilt_batch(self):
        params = small_params()
        graphs = [graph_from_smiles("CCO"), graph_from_smiles("CC")]
        from_list = encode_multilevel(graphs, params)
        from_batch = encode_multilevel(GraphBatch(graphs), params)
        for a, b in zip(from_list, from_batch):
            np.testing.assert_array_equal(a.values, b.values)


class TestEncoderGradients:
    def test_full_encoder_gradcheck(self):
        from molmatch.tensor import add

        rng = np.random.default_rng(7)
        params = EncoderParams.init(2, 3, seed=11)
        graphs = [graph_from_smiles(s) for s in ("CCO", "C", "C=C")]
        weights = [Tensor(rng.normal(size=(3, 3))) for _ in range(2)]

        def build_loss():
            levels = encode_multilevel(graphs, params)
            return add(sum_all(mul(levels[0], weights[0])), sum_all(mul(levels[1], weights[1])))

        tensors = params.tensors()
        analytic = backward(build_loss(), params=tensors.values(), write_grad=False)
        named = {name: analytic[t] for name, t in tensors.items()}
        numeric = fd_gradients(lambda: build_loss().item(), tensors)
        assert_grads_match(named, numeric)
