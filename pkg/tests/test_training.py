import numpy as np
import pytest
import torch

from puppetry import dataset, oracle, training
from puppetry.errors import InvalidInputError, TrainingDiverged
from puppetry.expression_net import AudioExpressionNet
from puppetry.face import PersonMapping


def tiny_corpus(n_persons=1, frames=40, seed=0, **spec_kw):
    spec = oracle.OracleSpec(seed=seed, **spec_kw)
    seqs = []
    for p in range(n_persons):
        s = oracle.generate_sequence(spec, frames, person_index=p, render=False)
        seqs.append(dataset.SequenceData(
            person_id=s.name, windows=s.windows,
            visual_deltas=s.deltas.astype(np.float32),
            basis=s.demo_face.basis, alpha=s.alpha))
    return seqs


def tiny_target(frames=6, res=32, seed=0, **spec_kw):
    spec = oracle.OracleSpec(seed=seed, resolution=res, **spec_kw)
    s = oracle.generate_sequence(spec, frames, person_index=0)
    return dataset.TargetData(
        name=s.name, frames=s.images, uvmaps=s.uvmaps, poses=s.poses,
        masks=s.masks, basis=s.demo_face.basis, triangles=s.demo_face.triangles,
        uv_coords=s.demo_face.uv_coords, alpha=s.alpha,
        visual_deltas=s.deltas.astype(np.float32), logits=s.stream)


def named_state(result):
    out = {f"net.{k}": v.detach().numpy().copy()
           for k, v in result.net.named_parameters()}
    return out


def test_lr_schedule_flat_then_linear():
    cfg = training.TrainingConfig(epochs=50, decay_epochs=30)
    for e in range(1, 21):
        assert training.lr_for_epoch(cfg, e) == pytest.approx(1e-4)
    rates = [training.lr_for_epoch(cfg, e) for e in range(21, 51)]
    assert all(a > b for a, b in zip(rates, rates[1:]))
    diffs = np.diff(rates)
    assert np.allclose(diffs, diffs[0])  # linear
    assert rates[-1] == pytest.approx(1e-4 / 31)
    # extrapolates to zero one epoch past the end
    assert training.lr_for_epoch(cfg, 51) == pytest.approx(0.0, abs=1e-12)


def test_config_validation():
    with pytest.raises(InvalidInputError):
        training.TrainingConfig(epochs=10, decay_epochs=20)
    with pytest.raises(InvalidInputError):
        training.TrainingConfig(learning_rate=0.0)


def test_zero_epochs_returns_initialization():
    seqs = tiny_corpus()
    cfg = training.TrainingConfig(epochs=0, decay_epochs=0, seed=7)
    res = training.train_a2e(seqs, cfg)
    torch.manual_seed(7)
    fresh = AudioExpressionNet()
    for (_, a), (_, b) in zip(res.net.named_parameters(), fresh.named_parameters()):
        assert torch.equal(a, b)
    assert np.array_equal(res.mappings[seqs[0].person_id].matrix, np.zeros((76, 32)))


def test_equal_seeds_identical_loss_curves():
    seqs = tiny_corpus()
    cfg = training.TrainingConfig(epochs=2, decay_epochs=0, seed=3)
    r1 = training.train_a2e(seqs, cfg)
    r2 = training.train_a2e(seqs, cfg)
    assert r1.history == r2.history
    s1, s2 = named_state(r1), named_state(r2)
    for k in s1:
        assert np.array_equal(s1[k], s2[k])


def test_training_reduces_loss():
    seqs = tiny_corpus(frames=60)
    cfg = training.TrainingConfig(epochs=6, decay_epochs=0, seed=0)
    res = training.train_a2e(seqs, cfg)
    assert res.history[-1]["train_loss"] < res.history[0]["train_loss"]


def test_empty_and_invalid_datasets():
    with pytest.raises(InvalidInputError):
        training.train_a2e([], training.TrainingConfig())
    seqs = tiny_corpus()
    dup = [seqs[0], seqs[0]]
    with pytest.raises(InvalidInputError):
        training.train_a2e(dup, training.TrainingConfig())


def test_nan_loss_aborts_with_diagnostic():
    seqs = tiny_corpus(frames=20)
    # inf reference coefficients overflow float32 vertex math -> non-finite loss
    seqs[0].visual_deltas[:] = 1e30
    cfg = training.TrainingConfig(epochs=1, decay_epochs=0, seed=0,
                                  validation_fraction=0.0)
    with pytest.raises(TrainingDiverged, match="epoch 1"):
        training.train_a2e(seqs, cfg)


def test_a2e_checkpoint_resume_matches_uninterrupted(tmp_path):
    seqs = tiny_corpus(frames=30)
    cfg4 = training.TrainingConfig(epochs=4, decay_epochs=0, seed=1)
    straight = training.train_a2e(seqs, cfg4, out_dir=tmp_path / "straight")

    cfg2 = training.TrainingConfig(epochs=2, decay_epochs=0, seed=1)
    training.train_a2e(seqs, cfg2, out_dir=tmp_path / "resumed")
    resumed = training.train_a2e(seqs, cfg4, out_dir=tmp_path / "resumed",
                                 resume_from=tmp_path / "resumed" / "a2e_final.ckpt")

    assert [h["train_loss"] for h in resumed.history] == \
           [h["train_loss"] for h in straight.history]
    s1, s2 = named_state(straight), named_state(resumed)
    for k in s1:
        assert np.array_equal(s1[k], s2[k])


def test_adapt_new_target_recovers_known_mapping():
    seqs = tiny_corpus(frames=50)
    cfg = training.TrainingConfig(epochs=1, decay_epochs=0, seed=0)
    res = training.train_a2e(seqs, cfg)

    spec = oracle.OracleSpec(seed=99)
    new_seq = oracle.generate_sequence(spec, 48, person_index=5, render=False)
    codes = training.predict_sequence_codes(res.net, new_seq.windows)
    rng = np.random.default_rng(0)
    m_true = rng.standard_normal((76, 32)) * 0.1
    deltas = codes @ m_true.T  # generated from the trained model's own codes
    mapping = training.adapt_new_target(res.net, new_seq.windows, deltas)
    assert not mapping.rank_deficient
    assert np.max(np.abs(mapping.matrix - m_true)) <= 1e-6


def test_adapt_zero_deltas_and_short_sequences():
    seqs = tiny_corpus(frames=40)
    cfg = training.TrainingConfig(epochs=0, decay_epochs=0, seed=0)
    res = training.train_a2e(seqs, cfg)
    windows = seqs[0].windows

    mapping = training.adapt_new_target(res.net, windows, np.zeros((40, 76)),
                                        ridge=1e-3)
    assert np.allclose(mapping.matrix, 0.0, atol=1e-10)

    with pytest.warns(UserWarning):
        short = training.adapt_new_target(res.net, windows[:20],
                                          np.zeros((20, 76)), ridge=0.0)
    assert short.rank_deficient


def test_renderer_zero_epochs_and_determinism():
    target = tiny_target()
    cfg = training.TrainingConfig(epochs=0, decay_epochs=0, seed=5, batch_size=1)
    r1 = training.train_renderer(target, cfg, perceptual="none")
    torch.manual_seed(5)
    from puppetry.renderer import NeuralTexture
    fresh = NeuralTexture()
    assert torch.equal(r1.texture.grid, fresh.grid)

    cfg2 = training.TrainingConfig(epochs=1, decay_epochs=0, seed=5, batch_size=1)
    a = training.train_renderer(target, cfg2, perceptual="none")
    b = training.train_renderer(target, cfg2, perceptual="none")
    assert a.history == b.history
    assert torch.equal(a.texture.grid, b.texture.grid)
    assert all(torch.equal(p, q) for p, q in zip(a.interior.parameters(),
                                                 b.interior.parameters()))


def test_renderer_descends_and_resumes(tmp_path):
    target = tiny_target(frames=4)
    cfg = training.TrainingConfig(epochs=3, decay_epochs=0, seed=2, batch_size=1)
    straight = training.train_renderer(target, cfg, perceptual="none",
                                       out_dir=tmp_path / "s")
    assert straight.history[-1]["train_loss"] < straight.history[0]["train_loss"]

    cfg1 = training.TrainingConfig(epochs=1, decay_epochs=0, seed=2, batch_size=1)
    training.train_renderer(target, cfg1, perceptual="none", out_dir=tmp_path / "r")
    resumed = training.train_renderer(target, cfg, perceptual="none",
                                      out_dir=tmp_path / "r",
                                      resume_from=tmp_path / "r" / "renderer.ckpt")
    assert [h["train_loss"] for h in resumed.history] == \
           [h["train_loss"] for h in straight.history]
    assert torch.equal(straight.texture.grid, resumed.texture.grid)


def test_checkpoint_round_trip_through_files(tmp_path):
    from puppetry.checkpoint import load_checkpoint
    seqs = tiny_corpus(frames=20)
    cfg = training.TrainingConfig(epochs=1, decay_epochs=0, seed=0)
    res = training.train_a2e(seqs, cfg, out_dir=tmp_path)
    ckpt = load_checkpoint(tmp_path / "a2e_final.ckpt")
    net = training.a2e_from_checkpoint(ckpt)
    for (_, a), (_, b) in zip(net.named_parameters(), res.net.named_parameters()):
        assert torch.equal(a, b)
    log = (tmp_path / "log.jsonl").read_text().strip().splitlines()
    assert len(log) > 1

    mapping = PersonMapping(np.ones((76, 32)) * 0.5, rank_deficient=True)
    from puppetry.checkpoint import save_checkpoint
    save_checkpoint(tmp_path / "m.ckpt", training.mapping_to_checkpoint(mapping, "x"))
    loaded = training.mapping_from_checkpoint(load_checkpoint(tmp_path / "m.ckpt"))
    assert loaded.rank_deficient
    assert np.allclose(loaded.matrix, 0.5)
