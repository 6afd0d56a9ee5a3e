import math

import numpy as np
import pytest

from conftest import toy_config, toy_pairs
from ctvae import tensor as T
from ctvae.data import make_batch
from ctvae.gradcheck import grad_check
from ctvae.models import (DESK_PRESET, GENERATOR_KINDS, ModelConfig, Trainer, TrainingDiverged, build_model,
                          evaluate_nll, preset)
from ctvae.tensor import Tensor
from ctvae.variational import kl_vs_standard


def f64_model(kind, **kw):
    with T.default_dtype(np.float64):
        return build_model(toy_config(kind, **kw))


def zero_layer(layer):
    layer.weight.data[...] = 0
    layer.bias.data[...] = 0


# -- config -------------------------------------------------------------------------

def test_config_defaults_and_preset():
    cfg = ModelConfig()
    assert (cfg.hidden_dim, cfg.latent_dim, cfg.vocab_cap, cfg.lr) == (300, 100, 35000, 5e-4)
    assert (cfg.beam_size, cfg.n_z, cfg.seq2seq_beam, cfg.rerank_lambda, cfg.top_k) == (20, 50, 50, 5.0, 5)
    desk = preset("desk")
    assert all(getattr(desk, k) == v for k, v in DESK_PRESET.items())
    assert preset("full") == cfg
    with pytest.raises(ValueError):
        preset("laptop")


def test_config_round_trip_and_validation():
    cfg = toy_config("cvae")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.digest() == toy_config("cvae").digest() != toy_config("ctvae").digest()
    with pytest.raises(ValueError):
        ModelConfig.from_dict({**cfg.to_dict(), "dropout": 0.1})
    with pytest.raises(ValueError):
        ModelConfig(kind="transformer")
    with pytest.raises(ValueError):
        ModelConfig(hidden_dim=0)


def test_model_needs_vocab_size():
    with pytest.raises(ValueError):
        build_model(ModelConfig(kind="ctvae"))


# -- condition encoder ----------------------------------------------------------------

def test_condition_encoder_dim_and_determinism():
    m = build_model(ModelConfig(kind="seq2seq", vocab_size=10))
    x, _ = m.encode_condition([[4, 5, 6]])
    assert x.shape == (1, 300)
    np.testing.assert_array_equal(m.encode_condition([[4, 5, 6]])[0].data, x.data)


def test_condition_encoder_separates_posts():
    m = build_model(toy_config("ctvae"))
    a = m.encode_condition([[4, 5, 6, 7]])[0].data
    b = m.encode_condition([[4, 5, 9, 7]])[0].data
    assert np.linalg.norm(a - b) > 0


# -- loss identities -----------------------------------------------------------------

def test_ctvae_zero_recognition_has_zero_kl():
    m = f64_model("ctvae")
    zero_layer(m.recognition.layers[-1])
    batch = make_batch(toy_pairs(4))
    terms = m.loss(batch, m.sample_eps(batch.size, np.random.default_rng(0)), kl_w=1.0)
    assert terms.kl.item() == 0.0
    assert terms.total.item() == terms.nll.item()


def test_uniform_decoder_nll_is_log_v():
    for kind in GENERATOR_KINDS:
        m = f64_model(kind)
        zero_layer(m.decoder.out)
        batch = make_batch(toy_pairs(4))
        terms = m.loss(batch, None, 0.0)
        assert terms.nll_sum >= 0
        assert terms.nll_sum / batch.n_tokens == pytest.approx(math.log(20), rel=1e-12)


def test_cvae_matching_recognition_and_prior_gives_zero_kl():
    m = f64_model("cvae")
    zero_layer(m.recognition.layers[-1])
    zero_layer(m.prior.layers[-1])
    terms = m.loss(make_batch(toy_pairs(4)), None, 1.0)
    assert terms.kl.item() == 0.0


def test_cvae_simple_kl_is_kl_vs_standard():
    m = f64_model("cvae-simple")
    batch = make_batch(toy_pairs(4))
    terms = m.loss(batch, None, 1.0)
    x, _ = m.encode_condition(batch.post, batch.post_mask)
    y = m.encode_response(batch.resp, batch.resp_mask)
    expected = T.mean(kl_vs_standard(m.recognize(x, y))).item()
    assert terms.kl.item() == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("kind", ["ctvae", "cvae"])
def test_toy_loss_gradients(kind):
    m = f64_model(kind, embed_dim=4, hidden_dim=8, latent_dim=4, vocab_size=12, init_std=0.5)
    batch = make_batch([([4, 5, 6], [7, 8]), ([9, 10, 11, 4], [5, 6, 7, 8])])
    eps = m.sample_eps(2, np.random.default_rng(1))
    assert grad_check(lambda: m.loss(batch, eps, 0.5).total, m.parameters()) < 1e-3


# -- attention ------------------------------------------------------------------------

def test_attention_weights():
    m = f64_model("seq2seq")
    rng = np.random.default_rng(0)
    h = Tensor(rng.normal(size=(2, 32)))
    w1, ctx1 = m.decoder.attend(h, Tensor(rng.normal(size=(2, 1, 32))), np.zeros((2, 1)))
    np.testing.assert_array_equal(w1.data, 1.0)
    enc = Tensor(rng.normal(size=(2, 5, 32)))
    bias = np.array([[0.0] * 5, [0.0] * 3 + [-1e9] * 2])
    w, ctx = m.decoder.attend(h, enc, bias)
    np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(w.data[1, 3:] == 0.0)
    assert ctx.shape == (2, 32)


def test_seq2seq_overfits_single_pair():
    cfg = toy_config("seq2seq")
    m = build_model(cfg)
    tr = Trainer(m, cfg)
    pair = [([4, 5, 6], [7, 8, 9])]
    for _ in range(500):
        tr.train_epoch(pair)
        if evaluate_nll(m, pair)[0] < 0.05:
            break
    assert evaluate_nll(m, pair)[0] < 0.05
    assert tr.step <= 500


# -- training schedule ----------------------------------------------------------------

def test_pretrain_phase_gives_no_kl_gradient():
    cfg = toy_config("cvae", pretrain_steps=10)
    m = build_model(cfg)
    tr = Trainer(m, cfg)
    before = {k: v.data.copy() for k, v in m.prior.parameters().items()}
    tr.train_epoch(toy_pairs(8))
    # the prior network only enters the KL term, so it must not move while the weight is 0
    for k, v in m.prior.parameters().items():
        np.testing.assert_array_equal(v.data, before[k])
        np.testing.assert_array_equal(v.grad, 0.0)


def test_ctvae_pretrain_gradient_is_reconstruction_gradient():
    m = f64_model("ctvae")
    batch = make_batch(toy_pairs(4))
    eps = m.sample_eps(batch.size, np.random.default_rng(2))
    params = m.parameters()
    m.zero_grad()
    T.backward(m.loss(batch, eps, 0.0).total)
    total = {k: p.grad.copy() for k, p in params.items()}
    m.zero_grad()
    T.backward(m.loss(batch, eps, 0.0).nll)
    for k, p in params.items():
        np.testing.assert_array_equal(total[k], p.grad)


def test_one_batch_epoch_advances_step_once():
    cfg = toy_config("ctvae", batch_size=64)
    tr = Trainer(build_model(cfg), cfg)
    stats = tr.train_epoch(toy_pairs(8))
    assert tr.step == 1 and stats.steps == 1


def test_separate_mode_adds_kl_only_steps():
    cfg = toy_config("ctvae", batch_size=8, kl_mode="separate", ramp_steps=1)
    tr = Trainer(build_model(cfg), cfg)
    for _ in range(4):
        tr.train_epoch(toy_pairs(8))
    # weight is 0 at step 0; of steps 1..3 only step 3 is on the period
    assert tr.step == 4 and tr.optimizer.state.step == 5
    # a fixed weight switches the schedule off, so every step gets its KL update
    cfg = toy_config("ctvae", batch_size=8, kl_mode="separate", fixed_kl_weight=1.0)
    tr = Trainer(build_model(cfg), cfg)
    for _ in range(2):
        tr.train_epoch(toy_pairs(8))
    assert tr.step == 2 and tr.optimizer.state.step == 4


def test_masked_mode_uses_weight_only_on_period_steps():
    cfg = toy_config("ctvae", ramp_steps=1, kld_period=3)
    tr = Trainer(build_model(cfg), cfg)
    seen = []
    orig = tr.model.loss
    tr.model.loss = lambda b, e, w: seen.append(w) or orig(b, e, w)
    for _ in range(4):
        tr.train_epoch(toy_pairs(8))
    assert seen == [0.0, 0.0, 0.0, 1.0]


def test_ctvae_nll_decreases_over_first_epochs():
    cfg = toy_config("ctvae", batch_size=8, lr=5e-3)
    tr = Trainer(build_model(cfg), cfg)
    nlls = [tr.train_epoch(toy_pairs(32)).nll_per_token for _ in range(10)]
    assert all(b < a for a, b in zip(nlls, nlls[1:])), nlls


def test_divergence_is_reported_with_last_good_params():
    cfg = toy_config("cvae")
    m = build_model(cfg)
    tr = Trainer(m, cfg)
    m.decoder.out.bias.data[0] = np.nan
    with pytest.raises(TrainingDiverged) as exc:
        tr.train_epoch(toy_pairs(8))
    assert exc.value.step == 0 and exc.value.last_good is not None


@pytest.mark.parametrize("kind", GENERATOR_KINDS)
def test_training_is_deterministic(kind):
    def run():
        cfg = toy_config(kind, batch_size=8)
        m = build_model(cfg)
        tr = Trainer(m, cfg)
        tr.train_epoch(toy_pairs(16))
        return {k: v.data.tobytes() for k, v in m.parameters().items()}

    assert run() == run()
