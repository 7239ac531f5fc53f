import json
import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from octopus import datasets as ds
from octopus import downstream as dn
from octopus import dvqae as dv
from octopus import fedsim as fs
from octopus import quantizer as vq


def labelled(n=200, classes=10, seed=0):
    rng = np.random.default_rng(seed)
    return ds.GroupedDataset(rng.standard_normal((n, 1, 2, 2)), np.arange(n) % classes, rng.integers(0, 3, n))


# ---------------------------------------------------------------- partition

def test_iid_single_node_whole_dataset():
    data = labelled()
    parts = fs.partition(data, "iid", 1)
    assert len(parts) == 1 and np.array_equal(parts[0], np.arange(len(data)))


@pytest.mark.parametrize("scheme", fs.SCHEMES)
def test_partition_disjoint_exhaustive_deterministic(scheme):
    data = labelled(203)
    parts = fs.partition(data, scheme, 7, seed=4)
    allidx = np.concatenate(parts)
    assert sorted(allidx) == list(range(len(data)))
    again = fs.partition(data, scheme, 7, seed=4)
    assert all(np.array_equal(a, b) for a, b in zip(parts, again))


def test_worst_case_single_label_shards():
    data = labelled(200, 10)
    for nodes in (10, 20):
        parts = fs.partition(data, "noniid_worst", nodes, seed=1)
        for idx in parts:
            assert len(np.unique(data.content[idx])) == 1


def test_moderate_sorted_fraction():
    data = labelled(503, 10)
    parts = fs.partition(data, "noniid_moderate", 5, seed=2, fraction=0.2)
    assert abs(parts.sorted_count - 0.2 * len(data)) <= 1


def test_partition_rejects_zero_nodes():
    with pytest.raises(ValueError):
        fs.partition(labelled(), "iid", 0)


# ------------------------------------------------------------------- wire

def test_payload_sizes():
    assert len(fs.pack_indices(np.zeros((32, 32), int) + 255, 256)) == 1024
    assert len(fs.pack_indices(np.full((8, 8), 9), 10)) == 32
    assert fs.bits_per_index(10) == 4 and fs.bits_per_index(256) == 8 and fs.bits_per_index(257) == 9


def test_pack_known_bits():
    assert fs.pack_indices([1, 2, 3], 4) == bytes([0b01101100])


def test_pack_rejects_out_of_range():
    with pytest.raises(ValueError):
        fs.pack_indices([0, 10], 10)
    with pytest.raises(ValueError):
        fs.pack_indices([-1], 10)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 5000), st.integers(1, 9), st.integers(1, 9), st.integers(1, 3), st.integers(0, 2**31))
def test_pack_roundtrip(K, H, W, slices, seed):
    x = np.random.default_rng(seed).integers(0, K, (H, W, slices) if slices > 1 else (H, W))
    buf = fs.pack_indices(x, K)
    assert len(buf) == fs.packed_size(H * W * slices, K)
    assert np.array_equal(fs.unpack_indices(buf, H, W, K, slices), x)


def test_latent_batch_roundtrip():
    rng = np.random.default_rng(0)
    idx = rng.integers(0, 10, (5, 4, 4))
    labels = rng.integers(0, 2, 5)
    payload = fs.encode_latent_batch(idx, labels, 10)
    assert len(payload) == 5 * fs.record_size(4, 4, 10)
    back, lab = fs.decode_latent_batch(payload, 4, 4, 10)
    assert np.array_equal(back, idx) and np.array_equal(lab, labels)


# ------------------------------------------------------------ cost models

def test_cost_examples():
    assert fs.cost_fl(fs.CostModelParams(N_C=2, N_M=10, N_E=3)) == 120
    assert fs.cost_split(fs.CostModelParams(N_S=1, N_D=5, eta=0.5, N_C=2, N_M=10, N_E=2)) == 40
    assert fs.cost_octopus(fs.CostModelParams(N_D=100, N_Z=2, N_M=10, pi=3, N_B=4, N_A=10)) == 232


def test_ratio_and_zero_division():
    p = fs.CostModelParams(N_C=2, N_M=10, N_E=3, N_S=1, N_D=5, eta=0.5)
    assert fs.efficiency_ratio(p) == fs.cost_fl(p) / fs.cost_split(p)
    with pytest.raises(ZeroDivisionError):
        fs.efficiency_ratio(fs.CostModelParams(N_C=1, N_M=1))
    with pytest.raises(ValueError):
        fs.CostModelParams(N_D=-1)


# --------------------------------------------------------------- syncing

def small_model(seed=0, K=8):
    data = ds.synth_content_style(2, 2, 10, noise=0.05, seed=seed, shape=(1, 8, 8))
    return dv.build_model((1, 8, 8), K=K, M=4, hidden=(3, 4), seed=seed, seed_data=data.samples), data


def test_sync_single_node_equals_node_atoms():
    model, data = small_model()
    server = fs.ServerState(model.copy())
    node = fs.NodeState(0, data, model.copy())
    node.ema_refresh(np.arange(len(data)))
    msg = fs.codebook_sync(node, server)
    server.merge_pending()
    assert np.array_equal(server.model.codebook.atoms, node.model.codebook.atoms)
    assert msg.size == vq.serialized_size(8, 4)
    assert server.version == 1


def test_sync_identical_nodes_idempotent():
    model, data = small_model(1)
    server = fs.ServerState(model.copy())
    nodes = [fs.NodeState(i, data, model.copy()) for i in range(2)]
    for n in nodes:
        n.ema_refresh(np.arange(len(data)))
        fs.codebook_sync(n, server)
    server.merge_pending()
    assert np.allclose(server.model.codebook.atoms, nodes[0].model.codebook.atoms, rtol=0, atol=1e-15)


def test_sync_shape_mismatch():
    model, data = small_model(2)
    other, _ = small_model(2, K=4)
    server = fs.ServerState(model)
    node = fs.NodeState(0, data, other)
    with pytest.raises(fs.ProtocolError):
        fs.codebook_sync(node, server)


def test_node_cannot_send_model_or_raw():
    model, data = small_model(3)
    node = fs.NodeState(0, data, model)
    with pytest.raises(fs.PrivacyViolation):
        node.emit(fs.MODEL_DOWNLOAD, b"x")


# ------------------------------------------------------------- simulator

@pytest.fixture(scope="module")
def synth_splits():
    data = ds.synth_content_style(3, 4, 25, noise=0.05, seed=5, shape=(1, 8, 8))
    return ds.split(data, seed=5)


def sim_config(**kw):
    base = dict(nodes=3, K=16, M=4, hidden=(4, 8), global_steps=30, batch_size=20, classifier_steps=40,
                classifier_hidden=(16,), seed=1)
    base.update(kw)
    return fs.OctopusConfig(**base)


def test_run_ledger_matches_formula(synth_splits):
    for cfg in (sim_config(sync_period=0), sim_config(sync_period=2, partition="noniid_worst"),
                sim_config(sync_period=1, fine_tune_mode="both", G=4),
                sim_config(sync_period=3, fine_tune_mode="codebook_ema_only", n_c=2, download_model=False)):
        res = fs.run_octopus(cfg, synth_splits)
        led = res.ledger
        assert led.total == fs.cost_octopus(led.params)
        assert led.bytes["collection"] == led.params.N_D * led.params.N_Z
        assert led.params.N_D == len(synth_splits.nodes) == res.server.store_size()
        if cfg.sync_period == 0:
            assert led.bytes["codebook_sync"] == 0
        else:
            assert led.params.N_B == cfg.nodes * vq.serialized_size(cfg.K, cfg.M, cfg.n_c)
        assert not fs.scan_messages(res.messages, synth_splits.nodes.samples)


def test_one_node_iid_store_size(synth_splits):
    res = fs.run_octopus(sim_config(nodes=1), synth_splits)
    assert res.server.store_size() == len(synth_splits.nodes)
    assert 0.0 <= res.metrics["accuracy"] <= 1.0


def test_run_deterministic(synth_splits):
    a = fs.run_octopus(sim_config(sync_period=1), synth_splits)
    b = fs.run_octopus(sim_config(sync_period=1), synth_splits)
    assert a.ledger.to_dict() == b.ledger.to_dict()
    assert a.metrics == b.metrics


def test_ema_mode_needs_sync(synth_splits):
    with pytest.raises(ValueError, match="sync_period"):
        fs.run_octopus(sim_config(fine_tune_mode="both"), synth_splits)


def test_phase_tagged_failure(synth_splits):
    with pytest.raises(fs.PhaseError) as err:
        fs.run_octopus(sim_config(K=10_000), synth_splits)
    assert err.value.phase == "global_init"


def test_scan_detects_leak():
    raw = np.random.default_rng(0).random((2, 1, 4, 4))
    clean = fs.WireMessage(fs.LATENT_BATCH, b"\x00\x01\x02", "node0")
    leak = fs.WireMessage(fs.LATENT_BATCH, b"hdr" + raw[1].astype("<f8").tobytes(), "node1")
    assert fs.scan_messages([clean], raw) == []
    assert fs.scan_messages([clean, leak], raw)
    private = np.array([0.25, -1.5, 3.0])
    sneaky = fs.WireMessage(fs.CODEBOOK_DELTA, private.astype("<f8").tobytes(), "node0")
    assert fs.scan_messages([sneaky], private_vectors=[private])
    bad_kind = fs.WireMessage("RAW", b"", "node0")
    assert fs.scan_messages([bad_kind])


def test_ledger_exports(tmp_path, synth_splits):
    res = fs.run_octopus(sim_config(sync_period=1), synth_splits)
    fs.write_ledger(res.ledger, tmp_path / "l.json", tmp_path / "l.csv", res.metrics)
    doc = json.loads((tmp_path / "l.json").read_text())
    assert doc["ledger"]["total"] == doc["ledger"]["analytic_total"]
    rows = list(csv.DictReader(open(tmp_path / "l.csv")))
    assert [r["phase"] for r in rows][-1] == "total"
    assert set(rows[0]) == {"phase", "bytes", "analytic_bytes", "accuracy", "entropy_bits"}
    for r in rows:
        assert float(r["bytes"]) == float(r["analytic_bytes"])


# ----------------------------------------------------------------- FedAvg

def test_fedavg_single_client_equals_local_epoch():
    data = labelled(120, 3, seed=3)
    cfg = fs.FedAvgConfig(clients=1, rounds=1, batch_size=16, hidden=(8,), seed=2)
    model, ledger, _ = fs.run_fedavg_baseline(cfg, data)
    ref = dn.MultiHeadClassifier(4, (3,), 0, (8,), 2)
    fs.local_epoch(ref, data.samples.reshape(120, -1), data.content, 16, cfg.lr, 2 * 100003)
    for a, b in zip(model.parameters(), ref.parameters()):
        assert np.array_equal(a.value, b.value)
    assert ledger.parameter_units == ledger.analytic() == 2 * 1 * ref.parameter_count() * 1


def test_fedavg_identical_shards_equal_single():
    data = labelled(60, 3, seed=4)
    idx = np.arange(60)
    cfg = fs.FedAvgConfig(clients=3, rounds=2, batch_size=10, hidden=(8,), seed=1)
    multi, led, _ = fs.run_fedavg_baseline(cfg, data, shards=[idx, idx, idx])
    single, _, _ = fs.run_fedavg_baseline(cfg, data, shards=[idx])
    for a, b in zip(multi.parameters(), single.parameters()):
        assert np.max(np.abs(a.value - b.value)) < 1e-9
    assert led.parameter_units == 2 * 3 * multi.parameter_count() * 2 == fs.cost_fl(led.params)


def test_fedavg_noniid_hurts():
    data = ds.synth_content_style(4, 1, 60, noise=0.6, seed=6, shape=(1, 4, 4))
    s = ds.split(data, seed=0)
    accs = {}
    for scheme in ("iid", "noniid_worst"):
        cfg = fs.FedAvgConfig(clients=4, rounds=5, batch_size=10, hidden=(16,), partition=scheme, seed=0, lr=1e-2)
        _, _, m = fs.run_fedavg_baseline(cfg, s.nodes, s.test, class_count=4)
        accs[scheme] = m["accuracy"]
    assert accs["iid"] > 0.75 and accs["noniid_worst"] < accs["iid"] - 0.3
