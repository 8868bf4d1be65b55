"""Tests for the unfolded networks: unfolding equivalence, layouts, init and checkpoints."""

import numpy as np
import pytest

from fewbit.bussgang import linearize_detection
from fewbit.core import SystemConfig, build_dft_pilot, complex_normal, stack_vectors, vec
from fewbit.likelihood import C_LOGISTIC, LikelihoodContext, gradient_ascent_channel, lipschitz_step
from fewbit.networks import (
    CENetParams,
    DetNetParams,
    antenna_rows_to_complex,
    antenna_to_full,
    b_detnet_forward,
    complex_to_antenna_rows,
    fbm_cenet_forward,
    fbm_detnet_forward,
    full_to_antenna,
    init_cenet_params,
    init_detnet_params,
    load_checkpoint,
    save_checkpoint,
)
from fewbit.quantizer import make_quantizer, observe
from fewbit.training import sample_cenet_batch, sample_det_batch
from fewbit.verify import unfolding_errors


@pytest.fixture
def est_setup():
    cfg = SystemConfig.default(N=4, K=2, bits=2, snr_db=10.0)
    pilot = build_dft_pilot(cfg)
    data = sample_cenet_batch(cfg, np.random.default_rng(0), 3)
    obs = observe(data.h @ pilot.antenna_design.T + data.z, make_quantizer(2, cfg.quantizer_scale))
    return cfg, pilot, data, obs


class TestUnfolding:
    def test_all_networks_match_their_iterations(self):
        errs = unfolding_errors(0)
        assert len(errs) == 5
        assert max(errs.values()) < 1e-10

    def test_default_cenet_is_lipschitz_gradient_ascent(self, est_setup):
        cfg, pilot, _, obs = est_setup
        net = fbm_cenet_forward(obs.q_up, obs.q_low, pilot, init_cenet_params(cfg, L=5))
        D = pilot.antenna_design
        # DFT pilot: ||D||_2^2 = Tt, so the Lipschitz step is 1 / (c^2 rho Tt)
        assert lipschitz_step(D, cfg.rho) == pytest.approx(1 / (C_LOGISTIC**2 * cfg.rho * cfg.Tt))
        ref = gradient_ascent_channel(LikelihoodContext(D, obs.q_up, obs.q_low, cfg.rho),
                                      lipschitz_step(D, cfg.rho), L=5)
        assert np.max(np.abs(net - ref)) < 1e-10

    def test_antenna_and_full_layouts_agree(self, est_setup):
        cfg, pilot, _, obs = est_setup
        params = init_cenet_params(cfg, L=4)
        per_antenna = fbm_cenet_forward(obs.q_up, obs.q_low, pilot, params)
        up_full, low_full = antenna_to_full(obs.q_up), antenna_to_full(obs.q_low)
        full = fbm_cenet_forward(up_full, low_full, pilot, params, layout="full")
        np.testing.assert_allclose(full_to_antenna(full, cfg.N), per_antenna, atol=1e-12)

    def test_layout_round_trips(self):
        rng = np.random.default_rng(1)
        H = complex_normal(rng, (2, 5, 3))
        rows = complex_to_antenna_rows(H)
        np.testing.assert_array_equal(antenna_rows_to_complex(rows), H)
        np.testing.assert_array_equal(full_to_antenna(antenna_to_full(rows), 5), rows)
        np.testing.assert_allclose(antenna_to_full(rows)[0], stack_vectors(vec(H[0])))

    def test_zero_layers(self, est_setup):
        cfg, pilot, _, obs = est_setup
        p = CENetParams(alpha=np.zeros(0), beta=1.0, pilot=pilot.X)
        np.testing.assert_array_equal(fbm_cenet_forward(obs.q_up, obs.q_low, pilot, p), 0.0)


class TestDetNets:
    @pytest.mark.parametrize("constellation", ["QPSK", "QAM16"])
    def test_outputs_bounded(self, constellation):
        cfg = SystemConfig.default(N=8, K=2, bits=2, snr_db=5.0, constellation=constellation)
        data = sample_det_batch(cfg, np.random.default_rng(2), 10, bussgang=True)
        A, Sn = linearize_detection(data.H, cfg.N0, make_quantizer(2, cfg.quantizer_scale))
        bp = init_detnet_params(cfg, "b-detnet", L=4)
        fp = init_detnet_params(cfg, "fbm-detnet", L=4)
        bound = bp.projector.bound + 1e-12
        assert np.all(np.abs(b_detnet_forward(data.y, A, Sn, bp)) <= bound)
        assert np.all(np.abs(fbm_detnet_forward(data.q_up, data.q_low, data.H, fp)) <= bound)

    def test_init(self):
        cfg = SystemConfig.default(N=16, K=2, snr_db=10.0)
        fp = init_detnet_params(cfg, "fbm-detnet", L=3)
        np.testing.assert_allclose(fp.alpha, 1 / 32)
        assert fp.beta == pytest.approx(C_LOGISTIC * np.sqrt(2 * cfg.rho))
        np.testing.assert_allclose(fp.t, fp.projector.delta_prime / 2)
        bp = init_detnet_params(cfg, "b-detnet", L=3)
        assert bp.L == 3 and np.all(bp.alpha > 0) and bp.beta == 0.0
        with pytest.raises(ValueError):
            init_detnet_params(cfg, "fbm-cenet")

    def test_noiseless_fbm_detnet_recovers_qpsk(self):
        # with a long run from the default start, high SNR, 3 bits: symbols come back
        cfg = SystemConfig.default(N=16, K=2, bits=3, snr_db=25.0)
        data = sample_det_batch(cfg, np.random.default_rng(3), 50)
        p = init_detnet_params(cfg, "fbm-detnet", L=30)
        x = fbm_detnet_forward(data.q_up, data.q_low, data.H, p)
        assert np.mean(np.sign(x) == np.sign(data.x)) > 0.99


class TestCheckpoints:
    def test_cenet_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        p = CENetParams(alpha=rng.standard_normal(6), beta=1.2345678901234567,
                        pilot=complex_normal(rng, (4, 20)), trainable_pilot=True)
        save_checkpoint(tmp_path / "c.ckpt", p, {"snr_db": 10.0, "N": 32})
        q, meta = load_checkpoint(tmp_path / "c.ckpt")
        np.testing.assert_array_equal(q.alpha, p.alpha)
        np.testing.assert_array_equal(q.pilot, p.pilot)
        assert q.beta == p.beta and q.trainable_pilot
        assert meta == {"snr_db": "10.0", "N": "32"}

    @pytest.mark.parametrize("kind", ["b-detnet", "fbm-detnet"])
    def test_detnet_round_trip(self, tmp_path, kind):
        p = init_detnet_params(SystemConfig.default(constellation="QAM16"), kind, L=5)
        p.alpha = p.alpha * np.pi
        save_checkpoint(tmp_path / "d.ckpt", p)
        q, meta = load_checkpoint(tmp_path / "d.ckpt")
        assert q.kind == p.kind and q.constellation == "QAM16"
        np.testing.assert_array_equal(q.alpha, p.alpha)
        np.testing.assert_array_equal(q.t, p.t)
        assert q.beta == p.beta and meta == {}

    def test_rejects_foreign_files(self, tmp_path):
        (tmp_path / "x.ckpt").write_text("alpha = 1\n")
        with pytest.raises(ValueError, match="not a fewbit checkpoint"):
            load_checkpoint(tmp_path / "x.ckpt")
        (tmp_path / "y.ckpt").write_text("# fewbit checkpoint v99\n")
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(tmp_path / "y.ckpt")

    def test_loaded_params_reproduce_output(self, tmp_path, est_setup):
        cfg, pilot, _, obs = est_setup
        p = init_cenet_params(cfg, L=3)
        p.alpha = p.alpha * np.array([1.1, 0.7, 1.3])
        save_checkpoint(tmp_path / "c.ckpt", p)
        q, _ = load_checkpoint(tmp_path / "c.ckpt")
        np.testing.assert_array_equal(fbm_cenet_forward(obs.q_up, obs.q_low, pilot, q),
                                      fbm_cenet_forward(obs.q_up, obs.q_low, pilot, p))
