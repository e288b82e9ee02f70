import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uiesnn import network, profiler
from uiesnn.errors import StructuralError
from uiesnn.network import Layer, SpikeTrace
from uiesnn.neuron import LifConfig, LifState, lif_step


def test_energy_table_defaults_and_validation():
    t = profiler.EnergyTable()
    assert (t.e_mac_pj, t.e_acc_pj) == (4.6, 0.9)
    with pytest.raises(ValueError):
        profiler.EnergyTable(e_mac_pj=0)
    with pytest.raises(ValueError):
        profiler.EnergyTable(e_acc_pj=-1)


def test_layer_flops_examples():
    assert profiler.conv_flops(3, 64, 3, 512, 512) == 452_984_832
    assert profiler.conv_flops(1, 1, 1, 1, 1) == 1
    conv = Layer("c", "conv", ("x",), 64, 512, 512, in_channels=3, k=3, padding=1)
    assert profiler.layer_flops(conv) == 452_984_832
    assert profiler.layer_flops(Layer("p", "pool", ("c",), 64, 256, 256)) is None
    assert profiler.layer_flops(Layer("x", "concat", ("a", "b"), 8, 4, 4)) is None


@pytest.mark.parametrize("depth,gflops", [(3, 166.80), (4, 218.88), (5, 270.95)])
def test_network_flops_at_512(depth, gflops):
    g = network.build(network.NetworkConfig(depth=depth, base_channels=1, input_shape=(3, 64, 64)))
    full = network.NetworkConfig(depth=depth, base_channels=64, input_shape=(3, 512, 512))
    layers = network._layers_for(full)
    total = sum(profiler.layer_flops(layer) or 0 for layer in layers)
    assert abs(total / 1e9 - gflops) / gflops < 0.02
    assert profiler.graph_flops(g) > 0


def test_table_identities():
    e_cnn = profiler.cnn_energy(218.88e9)
    e_snn = profiler.snn_energy(147.49e9)
    assert round(e_cnn, 4) == 1.0068
    assert round(e_snn, 4) == 0.1327
    assert round(profiler.delta_e_percent(1.0068, 0.1327), 2) == 86.82
    assert f"{profiler.delta_e_percent(e_cnn, e_snn):.4g}" == "86.82"


def trace(counts, neurons, steps):
    return SpikeTrace(steps, {k: np.atleast_2d(v) for k, v in counts.items()}, neurons)


def test_spike_rate_examples():
    assert profiler.spike_rate(trace({"a": [[4, 4, 4, 4, 4]]}, {"a": 4}, 5), "a") == 5.0
    assert profiler.spike_rate(trace({"a": [[2, 1, 0]]}, {"a": 2}, 3), "a") == 1.5
    assert profiler.spike_rate(trace({"a": [[0, 0]]}, {"a": 7}, 2), "a") == 0.0
    two_images = trace({"a": [[2, 0], [0, 0]]}, {"a": 2}, 2)
    assert profiler.spike_rate(two_images, "a") == 0.5
    with pytest.raises(LookupError):
        profiler.spike_rate(two_images, "b")


@pytest.fixture(scope="module")
def small():
    cfg = network.NetworkConfig(depth=2, base_channels=4, timesteps=5, input_shape=(3, 16, 16))
    g = network.build(cfg, 0)
    img = np.random.default_rng(0).random((2, 3, 16, 16)).astype(np.float32)
    _, tr = network.infer(g, img)
    return g, tr


def test_report_consistency(small):
    g, tr = small
    rep = profiler.energy_report(g, tr)
    assert [c.layer for c in rep.layers] == [layer.name for layer in g.synaptic_layers()]
    for c in rep.layers:
        assert c.sops == c.flops * c.spike_rate
        assert 0 <= c.spike_rate <= tr.timesteps
        assert c.sops <= c.flops * tr.timesteps
        assert c.energy_j == pytest.approx(c.sops * 0.9e-12)
        assert c.cnn_energy_j == pytest.approx(c.flops * 4.6e-12)
    assert rep.e_cnn == pytest.approx(profiler.graph_flops(g) * 4.6e-12)
    assert rep.delta_e_percent == pytest.approx((rep.e_cnn - rep.e_snn) / rep.e_cnn * 100)
    assert rep.images == 2
    out = {c.layer: c for c in rep.layers}["out.conv"]
    assert out.rate_source == "dec1.lif2"
    assert "out.lif" not in rep.spike_rates


def test_csv_recomputes_to_summary(small):
    g, tr = small
    rep = profiler.energy_report(g, tr)
    rows = list(csv.DictReader(io.StringIO(rep.to_csv())))
    body, total = rows[:-1], rows[-1]
    assert total["layer"] == "TOTAL"
    e_cnn = sum(int(r["flops"]) * 4.6e-12 for r in body)
    e_snn = sum(float(r["sops"]) * 0.9e-12 for r in body)
    assert (e_cnn - e_snn) / e_cnn * 100 == pytest.approx(rep.delta_e_percent, rel=1e-12)
    assert float(total["snn_energy_j"]) == pytest.approx(rep.e_snn, rel=1e-12)
    assert f"dE {rep.delta_e_percent:.2f} %" in rep.summary()


def test_dataset_rates_are_mean_over_images(small):
    g, _ = small
    rng = np.random.default_rng(1)
    imgs = [rng.random((1, 3, 16, 16)).astype(np.float32) for _ in range(3)]
    traces = [network.infer(g, im)[1] for im in imgs]
    merged = profiler.merge_traces(traces)
    for name in merged.counts:
        assert profiler.spike_rate(merged, name) == pytest.approx(
            np.mean([profiler.spike_rate(t, name) for t in traces]))


def test_structural_mismatch(small):
    g, tr = small
    broken = SpikeTrace(tr.timesteps, dict(list(tr.counts.items())[1:]), tr.neurons)
    with pytest.raises(StructuralError):
        profiler.energy_report(g, broken)
    other = network.build(network.NetworkConfig(depth=1, base_channels=4, input_shape=(3, 16, 16)))
    with pytest.raises(StructuralError):
        profiler.energy_report(other, tr)
    with pytest.raises(StructuralError):
        profiler.merge_traces([tr, SpikeTrace(3, tr.counts, tr.neurons)])


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2 ** 16), lo=st.floats(0.05, 1.0), delta=st.floats(0.0, 1.0))
def test_higher_threshold_never_fires_more_in_one_step(seed, lo, delta):
    rng = np.random.default_rng(seed)
    v0 = rng.normal(0, 0.5, 50)
    s0 = (rng.random(50) < 0.3).astype(float)
    cur = rng.normal(0, 0.5, 50)
    counts = []
    for th in (lo, lo + delta):
        _, s = lif_step(LifState(v0.copy(), s0.copy(), 0.0), cur, LifConfig(threshold=th))
        counts.append(s.sum())
    assert counts[1] <= counts[0]
