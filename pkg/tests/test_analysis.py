import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from gpn import analysis as an
from gpn import autodiff as ad
from gpn.autodiff import Value
from gpn.network import Network
from gpn.neurons import NeuronConfig, NeuronKind, lif_step, zero_state
from gpn.training import TrainConfig

from synthetic import random_counts


def lif_trace(beta, xs):
    """Run one LIF neuron on scalar inputs; return (h nodes, spikes, x leaves)."""
    cfg = NeuronConfig(NeuronKind.LIF, beta=beta)
    xs = [Value(np.array([[x]]), requires_grad=True) for x in xs]
    state, hs, spikes = zero_state(1, 1), [], []
    for x in xs:
        state, s, h = lif_step(state, x, cfg)
        hs.append(h)
        spikes.append(s.item())
    return hs, np.array(spikes), xs


class TestChainGradient:
    def test_no_spikes_is_geometric(self):
        np.testing.assert_allclose(an.lif_chain_gradient(0.5, np.zeros(4)), [0.125, 0.25, 0.5, 1.0])

    def test_spike_cuts_the_chain(self):
        g = an.lif_chain_gradient(0.9, [0, 1, 0, 0])
        np.testing.assert_array_equal(g[:2], 0.0)
        np.testing.assert_allclose(g[2:], [0.9, 1.0])

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.05, 0.95), st.lists(st.floats(0, 4), min_size=1, max_size=25))
    def test_matches_autodiff(self, beta, xs):
        hs, spikes, leaves = lif_trace(beta, xs)
        ad.backward(ad.sum_all(hs[-1]))
        got = np.array([h.grad.item() for h in hs])
        np.testing.assert_allclose(got, an.lif_chain_gradient(beta, spikes), rtol=0, atol=1e-12)
        # the input enters h_i scaled by (1 - beta)
        got_x = np.array([x.grad.item() for x in leaves])
        np.testing.assert_allclose(got_x, (1 - beta) * an.lif_chain_gradient(beta, spikes), atol=1e-12)


class TestGradVsTime:
    def test_record_shape_and_meta(self):
        net = Network("FC8-LIF8-FC3", 6, seed=0)
        x = random_counts(4, 7, 6, 3, rate=1.0).batch(np.arange(4))[0]
        rec = an.grad_vs_time(net, x, np.array([0, 1, 2, 0]), meta={"checkpoint": "c0"})
        assert len(rec) == 7 and np.all(np.isfinite(rec.mean)) and np.all(rec.std >= 0)
        assert rec.meta["neuron"] == "LIF" and rec.meta["T"] == 7 and rec.meta["checkpoint"] == "c0"

    def test_last_step_gradient_is_largest(self):
        net = Network("FC8-LIF8-FC3", 6, seed=0)
        x = random_counts(8, 12, 6, 3, rate=0.5).batch(np.arange(8))[0]
        rec = an.grad_vs_time(net, x, np.arange(8) % 3)
        assert rec.std[-1] > 0
        assert rec.std[0] < rec.std[-1]

    def test_raw_target(self):
        net = Network("FC8-GPN8-FC3", 6, seed=0)
        x = random_counts(3, 5, 6, 3).batch(np.arange(3))[0]
        assert len(an.grad_vs_time(net, x, np.zeros(3, int), target="raw")) == 5

    def test_requires_single_spiking_layer(self):
        net = Network("FC4-LIF4-FC4-LIF4-FC2", 3)
        with pytest.raises(an.AnalysisError):
            an.grad_vs_time(net, np.zeros((2, 3, 1)), np.zeros(1, int))

    def test_preconvergence_stop(self):
        data = random_counts(20, 6, 10, 4, seed=0, rate=0.5)
        net = Network("FC16-GPN16-FC4", 10, NeuronConfig(NeuronKind.GPN), seed=0)
        cfg = TrainConfig(steps=6, lr=1e-2, batch_size=20, max_epochs=100, augment=None,
                          early_stop_patience=100)
        epoch, initial, final = an.train_to_preconvergence(net, data, data, cfg)
        assert final < 0.9 * initial
        assert epoch < 100


class TestGateExtraction:
    def test_zero_input_first_step(self):
        net = Network("FC6-GPN6-FC2", 4, NeuronConfig(NeuronKind.GPN))
        rec = an.extract_gate_params(net, np.zeros((3, 4, 5)))
        assert rec.forget.shape == (5, 6, 3)
        for _, arr in rec.items():
            np.testing.assert_array_equal(arr[:, :, 0], 0.5)

    def test_gates_in_open_interval(self):
        net = Network("FC6-GPN6-FC2", 4, NeuronConfig(NeuronKind.GPN), seed=2)
        x = random_counts(5, 8, 4, 2, rate=2.0).batch(np.arange(5))[0]
        for _, arr in an.extract_gate_params(net, x).items():
            assert np.all((arr > 0) & (arr < 1))

    def test_ablated_gates_absent(self):
        cfg = NeuronConfig(NeuronKind.GPN, beta=0.5, ablation=frozenset({"FI"}))
        rec = an.extract_gate_params(Network("FC3-GPN3-FC2", 2, cfg), np.ones((2, 2, 1)))
        assert rec.forget is None and rec.input is None and rec.threshold is not None

    def test_no_gpn_layer(self):
        with pytest.raises(an.AnalysisError):
            an.extract_gate_params(Network("FC3-LIF3-FC2", 2), np.ones((2, 2, 1)))


class TestTimeConstants:
    @pytest.mark.parametrize("beta, tau", [(0.5, 2.0), (0.9, 10.0), (0.99, 100.0)])
    def test_values(self, beta, tau):
        assert an.to_time_constants(beta) == pytest.approx(tau, rel=1e-12)

    @given(st.floats(1e-6, 1 - 1e-6))
    def test_always_above_one(self, beta):
        assert an.to_time_constants(beta) > 1

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            an.to_time_constants([0.5, 1.0])


class TestHistograms:
    def test_constant_values_single_bin(self):
        h = an.spatial_histogram(np.full((3, 7, 4), 0.3))
        assert len(h.density) == 1 and h.mass() == pytest.approx(1.0)

    @given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=200), st.integers(2, 60))
    def test_unit_mass(self, xs, bins):
        assert an.density_histogram(xs, bins).mass() == pytest.approx(1.0, rel=1e-9)

    def test_uniform_samples(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(0, 1, 200_000)
        x[:2] = [0.0, 1.0]
        h = an.density_histogram(x, bins=10)
        np.testing.assert_allclose(h.density, 1.0, atol=0.03)

    def test_spatial_averaging(self):
        rec = np.zeros((2, 3, 4))
        rec[:, 1, :] = 1.0
        np.testing.assert_array_equal(an.spatial_values(rec), [0.0, 1.0, 0.0])

    def test_flat_trace(self):
        tr = an.temporal_trace(np.full((2, 5, 6), 0.7))
        np.testing.assert_allclose(tr.mean, 0.7)
        for q in tr.quantiles.values():
            np.testing.assert_allclose(q, 0.7)


class TestFits:
    def test_normal_closed_form(self):
        fit = an.fit_distribution([1.0, 2.0, 3.0], "normal")
        assert fit.mu == pytest.approx(2.0)
        assert fit.sigma == pytest.approx(math.sqrt(2 / 3), rel=1e-12)
        expected = stats.norm(2.0, math.sqrt(2 / 3)).logpdf([1.0, 2.0, 3.0]).sum()
        assert fit.loglik == pytest.approx(expected, rel=1e-12)

    def test_lognormal_monte_carlo(self):
        x = np.exp(np.random.default_rng(0).normal(0, 1, 100_000))
        fit = an.fit_distribution(x, "lognormal")
        assert abs(fit.mu) < 0.02 and abs(fit.sigma - 1) < 0.02

    def test_lognormal_matches_scipy(self):
        x = np.random.default_rng(1).lognormal(0.7, 0.4, 500)
        fit = an.fit_distribution(x, "lognormal")
        s, _, scale = stats.lognorm.fit(x, floc=0)
        assert fit.sigma == pytest.approx(s, rel=1e-6)
        assert fit.mu == pytest.approx(math.log(scale), rel=1e-6)
        assert fit.loglik == pytest.approx(stats.lognorm(s, 0, scale).logpdf(x).sum(), rel=1e-6)
        grid = np.linspace(0.5, 5, 7)
        np.testing.assert_allclose(fit.pdf(grid), stats.lognorm(s, 0, scale).pdf(grid), rtol=1e-5)

    def test_zero_variance(self):
        with pytest.raises(ValueError, match="variance"):
            an.fit_distribution([2.0, 2.0, 2.0], "normal")

    def test_lognormal_needs_positive(self):
        with pytest.raises(ValueError):
            an.fit_distribution([-1.0, 2.0], "lognormal")

    def test_param_report(self):
        net = Network("FC16-GPN16-FC2", 8, NeuronConfig(NeuronKind.GPN), seed=0)
        x = random_counts(6, 10, 8, 2, rate=1.0).batch(np.arange(6))[0]
        rep = an.param_report(an.extract_gate_params(net, x), bins=8)
        assert set(rep.spatial) == {"tau1", "tau2", "threshold"}
        assert np.all(rep.spatial["tau1"] > 1)
        assert rep.fits["tau1"].family == "lognormal" and rep.fits["threshold"].family == "normal"
        assert len(rep.traces["tau2"].mean) == 10


class TestExport:
    def test_gradient_record(self, tmp_path):
        path = an.export_analysis(an.GradientRecord(np.array([0.1, 0.2]), np.array([1.0, 2.0])),
                                  tmp_path / an.analysis_filename("grad", "lif", 2))
        assert path.name == "grad_lif_2.csv"
        assert path.read_text().splitlines() == ["i,mean,std", "1,0.1,1.0", "2,0.2,2.0"]

    def test_histogram(self, tmp_path):
        h = an.density_histogram([0.0, 1.0, 1.0, 2.0], bins=2)
        rows = an.read_csv_rows(an.export_analysis(h, tmp_path / "h.csv"))
        assert list(rows[0]) == ["bin_left", "bin_right", "density"]
        assert [float(r["density"]) for r in rows] == pytest.approx([0.25, 0.75])

    def test_fit(self, tmp_path):
        fit = an.fit_distribution([1.0, 2.0, 3.0], "normal")
        lines = an.export_analysis(fit, tmp_path / "f.csv").read_text().splitlines()
        assert lines[0] == "family,p1,p2,loglik" and lines[1].startswith("normal,2.0,")

    def test_trace(self, tmp_path):
        tr = an.temporal_trace(np.ones((1, 2, 3)), quantiles=(0.5,))
        lines = an.export_analysis(tr, tmp_path / "t.csv").read_text().splitlines()
        assert lines == ["t,mean,q0.5", "1,1.0,1.0", "2,1.0,1.0", "3,1.0,1.0"]

    def test_unknown_object(self, tmp_path):
        with pytest.raises(TypeError):
            an.export_analysis(object(), tmp_path / "x.csv")
