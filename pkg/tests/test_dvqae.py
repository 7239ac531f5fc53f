import numpy as np
import pytest

from octopus import datasets as ds
from octopus import dvqae as dv
from octopus import numerics as nx
from octopus import quantizer as vq

from oracles import frozen_quantized, surrogate_check, surrogate_loss


def toy_data(n_per=40, seed=0, shape=(2, 8, 8)):
    return ds.synth_content_style(3, 2, n_per, noise=0.05, seed=seed, shape=shape)


def identity_model(atoms, grid=(1, 1), source="normalized"):
    atoms = np.asarray(atoms, dtype=float)
    m = atoms.shape[1]
    shape = (m,) + tuple(grid)
    model = dv.DvqaeModel(nx.LayerStack([], shape), nx.LayerStack([], shape), vq.Codebook(atoms),
                          residual_source=source)
    return model


@pytest.mark.parametrize("groups,slices,source", [(1, 1, "raw"), (2, 1, "raw"), (1, 2, "raw"),
                                                  (1, 1, "normalized"), (2, 1, "normalized")])
def test_total_loss_gradient_conv(groups, slices, source):
    data = toy_data(4)
    model = dv.build_model((2, 8, 8), K=8, M=4, groups=groups, slices=slices, hidden=(3, 4), seed=1,
                           seed_data=data.samples, residual_source=source)
    idx = np.r_[0:3, 4:7]
    worst, checked = surrogate_check(model, data.samples[idx], data.private[idx])
    assert checked > 60
    assert worst < 1e-4


def test_total_loss_gradient_mlp():
    data = toy_data(4)
    model = dv.build_model((2, 8, 8), K=6, M=3, arch="mlp", hidden=10, grid=(2, 2), seed=2, seed_data=data.samples)
    worst, checked = surrogate_check(model, data.samples[:8], data.private[:8], coords=20)
    assert checked > 60
    assert worst < 1e-4


def test_frozen_codebook_gets_no_gradient():
    data = toy_data(4)
    model = dv.build_model((2, 8, 8), K=8, M=4, hidden=(3, 4), seed=3, seed_data=data.samples)
    p = model.atoms_parameter()
    p.zero_grad()
    model.loss_and_grads(data.samples[:4], data.private[:4], codebook_grad=False)
    assert not np.any(p.grad)


# ------------------------------------------------------------- components

def test_instance_norm_examples():
    norm = nx.InstanceNorm2d(1, eps=1e-12)
    assert not np.any(dv.instance_norm(np.full((1, 2, 2), 3.0), norm))
    out = dv.instance_norm(np.array([[[1.0, 3.0]]]), norm)
    assert np.allclose(out, [[[-1.0, 1.0]]], atol=1e-9)
    norm.gamma.value[...] = 0.0
    norm.beta.value[...] = 0.7
    assert np.all(dv.instance_norm(np.random.default_rng(0).standard_normal((1, 3, 3)), norm) == 0.7)


def test_encode_shapes_and_statistics():
    model = dv.build_model((1, 32, 32), K=10, M=64, seed=0)
    model.in_layer.gamma.value[...] = np.linspace(0.5, 2.0, 64)
    model.in_layer.beta.value[...] = np.linspace(-1, 1, 64)
    x = np.random.default_rng(1).random((3, 1, 32, 32))
    z = model.encode(x)
    assert z.shape == (3, 8, 8, 64)
    assert np.array_equal(model.encode(x[0]), z[0])
    gamma, beta = model.in_layer.gamma.value, model.in_layer.beta.value
    assert np.all(np.abs(z.mean(axis=(1, 2)) - beta) < 1e-9)
    # output std is gamma * sigma / sqrt(sigma^2 + eps) for pre-norm std sigma
    pre = model.encoder.forward(x).var(axis=(2, 3))
    expected = gamma * np.sqrt(pre / (pre + model.in_layer.eps))
    assert np.all(np.abs(z.std(axis=(1, 2)) - expected) < 1e-9)
    assert model.codebook.atoms.shape == (10, 64)


def test_encode_rejects_wrong_shape():
    model = dv.build_model((1, 16, 16), K=4, M=4, seed=0)
    with pytest.raises(nx.ShapeError):
        model.encode(np.zeros((2, 1, 12, 12)))


def test_model_shape_contract():
    enc = nx.LayerStack([], (3, 2, 2))
    with pytest.raises(nx.ShapeError):
        dv.DvqaeModel(enc, nx.LayerStack([], (3, 2, 2)), vq.Codebook(np.zeros((2, 4))))


def test_private_zero_when_cells_are_atoms():
    # 2x1 grid: IN maps any non-constant pair to (-1, +1) per channel
    model = identity_model([[-1.0, 1.0], [1.0, -1.0]], grid=(2, 1))
    x = np.array([[[[0.0], [5.0]], [[3.0], [1.0]]]])
    split = model.split_latent(dv.SampleGroup(x))
    assert np.array_equal(split.private, [0.0, 0.0])


def test_private_single_cell_residual():
    model = identity_model([[0.0, 0.0], [5.0, 5.0]])
    split = dv.LatentSplit(vq.slice_quantize(np.array([[[[1.0, 0.0]]]]), model.codebook), None)
    z = np.array([[[[1.0, 0.0]]]])
    res = model.quantize(z)
    priv, _ = dv._group_mean(z - res.quantized, np.zeros(1, dtype=int), 1)
    assert np.array_equal(priv[0], [1.0, 0.0])
    assert split.public.indices.item() == 0


def test_private_group_mean_of_two():
    model = identity_model([[-1.0, 1.0], [1.0, -1.0], [0.0, 0.0]], grid=(2, 1))
    model.codebook.atoms[2] = [-0.9, 0.9]
    a = np.array([[[0.0], [1.0]], [[1.0], [0.0]]])  # cells (-1, 1), (1, -1)
    b = np.array([[[0.0], [1.0]], [[0.0], [1.0]]])  # cells (-1, -1), (1, 1)
    x = np.stack([a, b])
    split = model.split_latent(dv.SampleGroup(x))
    z = model.encode(x)
    r = z - split.public.quantized
    per_sample = r.reshape(2, -1, 2).mean(axis=1)
    assert np.allclose(split.private, per_sample.mean(axis=0), atol=1e-15)
    assert np.any(split.private != 0)


def test_private_from_raw_features():
    # raw source keeps the channel means IN removes: cells (0, 3) and (5, 1) are normalised
    # to (-1, 1) and (1, -1), which quantise exactly, so the residual is the raw channel mean
    model = identity_model([[-1.0, 1.0], [1.0, -1.0]], grid=(2, 1), source="raw")
    x = np.array([[[[0.0], [5.0]], [[3.0], [1.0]]]])
    split = model.split_latent(dv.SampleGroup(x))
    assert np.allclose(split.private, [2.5, 2.0], atol=1e-4)
    assert model.encode(x).sum(axis=(0, 1, 2)) == pytest.approx([0.0, 0.0], abs=1e-12)
    with pytest.raises(ValueError):
        identity_model([[0.0, 0.0]], source="input")


def test_decode_identity_stub_adds_private():
    model = identity_model([[0.0, 0.0], [2.0, 1.0]], grid=(2, 2))
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 2, 2, 2))
    split = model.split_latent(dv.SampleGroup(x))
    out = model.decode(split)
    expected = split.public.quantized + split.private
    assert np.allclose(out, expected.transpose(0, 3, 1, 2), atol=1e-15)
    zero = dv.LatentSplit(split.public, np.zeros(2))
    assert np.array_equal(model.decode(zero), split.public.quantized.transpose(0, 3, 1, 2))


def test_total_loss_hand_sum_one_cell():
    # one cell: IN output is beta = 0, nearest atom is e, private = -e, decoder sees 0
    e = np.array([0.5, 0.0])
    model = identity_model([e, [3.0, 3.0]])
    x = np.array([[[[2.0]], [[-1.0]]]])
    total, parts = model.total_loss(dv.SampleGroup(x))
    w = model.weights
    assert parts["reconstruction"] == pytest.approx(2.5, abs=1e-15)
    assert parts["latent"] == pytest.approx(w.lam * 0.25, abs=1e-15)
    assert parts["codebook"] == pytest.approx(w.alpha * 0.25, abs=1e-15)
    assert parts["commitment"] == pytest.approx(w.beta * 0.25, abs=1e-15)
    assert total == pytest.approx(sum(parts.values()), abs=1e-15)
    assert w.lam == 0.01


def test_total_loss_lambda_zero_perfect_recon():
    model = identity_model([[0.5, 0.0], [3.0, 3.0]])
    model.weights.lam = 0.0
    x = np.zeros((1, 2, 1, 1))
    total, parts = model.total_loss(dv.SampleGroup(x))
    assert parts["reconstruction"] == 0.0 and parts["latent"] == 0.0
    assert total == parts["codebook"] + parts["commitment"]


def test_private_variants():
    data = toy_data(5)
    model = dv.build_model((2, 8, 8), K=8, M=4, hidden=(3, 4), seed=4, seed_data=data.samples)
    group = dv.SampleGroup(data.samples[data.private == 0][:4], 0)
    split = model.split_latent(group)
    plain = model.decode(split)
    assert np.array_equal(model.reconstruct_private_variant(split, "replaced", reference=split.private), plain)
    assert np.array_equal(model.reconstruct_private_variant(split, "perturbed", sigma=0.0), plain)
    a = model.reconstruct_private_variant(split, "perturbed", sigma=0.5, seed=3)
    b = model.reconstruct_private_variant(split, "perturbed", sigma=0.5, seed=3)
    assert np.array_equal(a, b) and not np.array_equal(a, plain)
    zero = dv.LatentSplit(split.public, np.zeros(4))
    assert np.array_equal(model.reconstruct_private_variant(split, "zeroed"), model.decode(zero))
    with pytest.raises(nx.ShapeError):
        model.reconstruct_private_variant(split, "replaced", reference=np.zeros(5))


# --------------------------------------------------------------- training

def test_train_zero_steps_is_noop():
    data = toy_data(5)
    model = dv.build_model((2, 8, 8), K=8, M=4, hidden=(3, 4), seed=5, seed_data=data.samples)
    before = dv.model_to_bytes(model)
    report = dv.train_global(model, data.samples, data.private, steps=0)
    assert report.steps == 0 and dv.model_to_bytes(model) == before


def test_training_halves_loss_and_beats_untrained_reconstruction():
    data = ds.synth_content_style(3, 2, 100, noise=0.05, seed=6, shape=(2, 8, 8))
    model = dv.build_model((2, 8, 8), K=16, M=8, arch="mlp", hidden=32, grid=(2, 2), seed=6,
                           seed_data=data.samples)
    untrained = model.reconstruction_error(data.samples, data.private)
    report = dv.train_global(model, data.samples, data.private, steps=2000, batch_size=100)
    assert report.final_loss < 0.5 * report.initial_loss
    assert model.reconstruction_error(data.samples, data.private) * 10 <= untrained


def test_training_deterministic():
    data = toy_data(10)
    runs = []
    for _ in range(2):
        model = dv.build_model((2, 8, 8), K=8, M=4, hidden=(3, 4), seed=7, seed_data=data.samples)
        dv.train_global(model, data.samples, data.private, steps=15, batch_size=20, seed=1)
        runs.append(dv.model_to_bytes(model))
    assert runs[0] == runs[1]


def test_divergence_reported():
    data = toy_data(5)
    model = dv.build_model((2, 8, 8), K=8, M=4, hidden=(3, 4), seed=8, seed_data=data.samples)
    model.decoder.layers[-1].weight.value[...] = np.nan
    with pytest.raises(dv.TrainingDivergedError) as err:
        dv.train_global(model, data.samples, data.private, steps=3, batch_size=10)
    assert err.value.report.diverged


def test_fine_tune_frozen_codebook_bitwise():
    data = toy_data(10)
    model = dv.build_model((2, 8, 8), K=8, M=4, hidden=(3, 4), seed=9, seed_data=data.samples)
    before = model.codebook.checksum()
    tuned = dv.fine_tune_local(model, data.samples, data.private, "encoder_decoder_only", batch_size=20)
    assert tuned.codebook.checksum() == before
    assert model.codebook.checksum() == before
    assert tuned.encoder.layers[0].weight.value.tobytes() != model.encoder.layers[0].weight.value.tobytes()


def test_fine_tune_ema_only_touches_codebook():
    data = toy_data(10)
    model = dv.build_model((2, 8, 8), K=8, M=4, hidden=(3, 4), seed=10, seed_data=data.samples)
    tuned = dv.fine_tune_local(model, data.samples, mode="codebook_ema_only", batch_size=20)
    assert tuned.codebook.checksum() != model.codebook.checksum()
    for a, b in zip(tuned.network_parameters(), model.network_parameters()):
        assert a.value.tobytes() == b.value.tobytes()


def test_fine_tune_ema_fixed_point():
    data = toy_data(10)
    model = dv.build_model((2, 8, 8), K=6, M=4, hidden=(3, 4), seed=11, seed_data=data.samples)
    cells = model.encode(data.samples).reshape(-1, 4)
    atoms = model.codebook.atoms
    for _ in range(200):  # Lloyd iterations to a fixed point of the mean rule
        a = vq.nearest_indices(cells, atoms)
        for k in range(len(atoms)):
            if np.any(a == k):
                atoms[k] = cells[a == k].mean(axis=0)
    tuned = dv.fine_tune_local(model, data.samples, mode="codebook_ema_only", batch_size=len(data))
    assert np.allclose(tuned.codebook.atoms, atoms, rtol=0, atol=1e-12)


def test_fine_tune_improves_local_heldout():
    data = ds.synth_content_style(3, 3, 60, noise=0.05, seed=12, shape=(2, 8, 8))
    atd = data.private == 0
    model = dv.build_model((2, 8, 8), K=16, M=8, arch="mlp", hidden=32, grid=(2, 2), seed=12,
                           seed_data=data.samples[atd])
    dv.train_global(model, data.samples[atd], data.private[atd], steps=300, batch_size=50)
    local = np.flatnonzero(data.private == 2)
    fit, held = local[::2], local[1::2]
    before = model.reconstruction_error(data.samples[held], data.private[held])
    tuned = dv.fine_tune_local(model, data.samples[fit], data.private[fit], "both", epochs=1, batch_size=10)
    assert tuned.reconstruction_error(data.samples[held], data.private[held]) <= before


def test_fine_tune_bad_mode():
    model = identity_model([[0.0, 0.0], [1.0, 1.0]])
    with pytest.raises(ValueError):
        dv.fine_tune_local(model, np.zeros((1, 2, 1, 1)), mode="everything")


# ---------------------------------------------------------- serialization

def test_model_roundtrip(tmp_path):
    data = toy_data(5)
    model = dv.build_model((2, 8, 8), K=8, M=4, groups=2, hidden=(3, 4), seed=13, seed_data=data.samples)
    dv.train_global(model, data.samples, data.private, steps=3, batch_size=10)
    path = tmp_path / "m.octm"
    dv.save_model(model, path)
    back = dv.load_model(path)
    assert dv.model_to_bytes(back) == path.read_bytes()
    x = data.samples[:4]
    assert np.array_equal(back.reconstruct(x), model.reconstruct(x))


def test_model_format_errors():
    model = identity_model([[0.0, 0.0]])
    buf = dv.model_to_bytes(model)
    with pytest.raises(dv.ModelFormatError):
        dv.model_from_bytes(b"NOPE" + buf[4:])
    with pytest.raises(dv.ModelFormatError):
        dv.model_from_bytes(buf[:-8])
