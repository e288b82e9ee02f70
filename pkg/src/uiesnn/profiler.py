"""Operation counts and energy estimates for the spiking network and its CNN twin.

A convolution-type layer costs ``Cin * Cout * k**2 * H_out * W_out`` MACs in
the non-spiking network. In the spiking network the same layer performs that
many accumulates scaled by the spike rate of its LIF layer (spikes summed over
all timesteps divided by the neuron count). Energies use 4.6 pJ per MAC and
0.9 pJ per accumulate (45 nm CMOS figures).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import StructuralError

PJ = 1e-12


@dataclass(frozen=True)
class EnergyTable:
    e_mac_pj: float = 4.6
    e_acc_pj: float = 0.9

    def __post_init__(self):
        if not (self.e_mac_pj > 0 and self.e_acc_pj > 0):
            raise ValueError("energy table entries must be strictly positive")


@dataclass(frozen=True)
class LayerCost:
    layer: str
    flops: int
    spike_rate: float
    sops: float
    energy_j: float
    cnn_energy_j: float
    rate_source: str = ""


@dataclass
class EnergyReport:
    layers: list
    e_cnn: float
    e_snn: float
    timesteps: int
    images: int = 1
    spike_rates: dict = field(default_factory=dict)

    @property
    def delta_e_percent(self):
        return delta_e_percent(self.e_cnn, self.e_snn)

    @property
    def total_flops(self):
        return sum(c.flops for c in self.layers)

    @property
    def total_sops(self):
        return sum(c.sops for c in self.layers)

    def summary(self):
        return (f"GFLOPs {self.total_flops / 1e9:.2f}  GSOPs {self.total_sops / 1e9:.2f}  "
                f"E_CNN {self.e_cnn:.4f} J  E_SNN {self.e_snn:.4f} J  dE {self.delta_e_percent:.2f} %")

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "rate_source", "flops", "spike_rate", "sops", "cnn_energy_j", "snn_energy_j"])
        for c in self.layers:
            w.writerow([c.layer, c.rate_source, c.flops, repr(c.spike_rate), repr(c.sops),
                        repr(c.cnn_energy_j), repr(c.energy_j)])
        w.writerow(["TOTAL", "", self.total_flops, "", repr(self.total_sops), repr(self.e_cnn), repr(self.e_snn)])
        return buf.getvalue()


def conv_flops(cin, cout, k, out_h, out_w):
    return int(cin) * int(cout) * int(k) ** 2 * int(out_h) * int(out_w)


def layer_flops(layer):
    """MAC count of a conv or deconv layer descriptor; None for layers without synapses."""
    if layer.kind not in ("conv", "deconv"):
        return None
    return conv_flops(layer.in_channels, layer.channels, layer.k, layer.height, layer.width)


def graph_flops(graph):
    return sum(layer_flops(layer) for layer in graph.synaptic_layers())


def spike_rate(trace, layer):
    """Spikes over all timesteps per neuron, averaged over the images in ``trace``."""
    name = getattr(layer, "name", layer)
    if name not in trace.counts:
        raise LookupError(f"no spike record for layer {name!r}")
    counts = np.asarray(trace.counts[name], dtype=np.float64)
    return float(counts.sum(axis=-1).mean() / trace.neurons[name])


def merge_traces(traces):
    """Concatenate per-image spike counts from several forward passes."""
    traces = list(traces)
    if not traces:
        raise ValueError("no traces to merge")
    first = traces[0]
    for t in traces[1:]:
        if t.timesteps != first.timesteps or set(t.counts) != set(first.counts):
            raise StructuralError("traces come from different networks or timestep counts")
    counts = {k: np.concatenate([np.atleast_2d(t.counts[k]) for t in traces], axis=0) for k in first.counts}
    return type(first)(first.timesteps, counts, dict(first.neurons))


def _rate_source(graph, layer):
    lif = graph[layer.lif]
    if lif.spiking:
        return lif.name
    # the readout never fires; charge its synapses at the rate of the spikes feeding it
    src = graph[layer.inputs[0]]
    if src.kind != "lif" or not src.spiking:
        raise StructuralError(f"{layer.name}: no spiking layer to take a rate from")
    return src.name


def energy_report(graph, trace, table=EnergyTable()):
    expected = {layer.name for layer in graph.spiking_layers()}
    if set(trace.counts) != expected:
        missing = sorted(expected - set(trace.counts))
        extra = sorted(set(trace.counts) - expected)
        raise StructuralError(f"trace does not match graph (missing {missing}, unexpected {extra})")
    rates = {name: spike_rate(trace, name) for name in sorted(expected)}
    costs = []
    for layer in graph.synaptic_layers():
        flops = layer_flops(layer)
        src = _rate_source(graph, layer)
        rate = rates[src]
        sops = flops * rate
        costs.append(LayerCost(layer.name, flops, rate, sops, sops * table.e_acc_pj * PJ,
                               flops * table.e_mac_pj * PJ, src))
    e_cnn = sum(c.cnn_energy_j for c in costs)
    e_snn = sum(c.energy_j for c in costs)
    images = int(np.atleast_2d(next(iter(trace.counts.values()))).shape[0]) if trace.counts else 0
    return EnergyReport(costs, e_cnn, e_snn, trace.timesteps, images, rates)


def cnn_energy(flops, table=EnergyTable()):
    return flops * table.e_mac_pj * PJ


def snn_energy(sops, table=EnergyTable()):
    return sops * table.e_acc_pj * PJ


def delta_e_percent(e_cnn, e_snn):
    return (e_cnn - e_snn) / e_cnn * 100.0
