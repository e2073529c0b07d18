from pathlib import Path

import numpy as np
import pytest

from vithash.autodiff import Tensor, no_grad
from vithash.data import generate_synthetic, split_protocol
from vithash.dual_stream import HashVectorSet, HashModel
from vithash.errors import ConfigError, FormatError
from vithash.loss import SimilarityBatch, total_loss
from vithash.retrieval import binarize
from vithash.train import (
    METRIC_FIELDS,
    Checkpoint,
    TrainConfig,
    config_to_text,
    desk_config,
    encode,
    parse_config,
    quantization_gap,
    train,
    write_metrics_csv,
)
from vithash.vit import BackboneConfig

from fd import numeric_grad, rel_error


def toy_config(steps=10, **sgd) -> TrainConfig:
    cfg = desk_config()
    cfg.backbone = BackboneConfig(image_size=8, patch_size=4, embed_dim=8, num_blocks=2, num_heads=2)
    cfg.sgd.total_steps = steps
    cfg.sgd.warmup_steps = 2
    cfg.batch_size = 6
    for k, v in sgd.items():
        setattr(cfg.sgd, k, v)
    return cfg


@pytest.fixture(scope="module")
def toy_data():
    return generate_synthetic(2, 20, 8, seed=0)


@pytest.fixture(scope="module")
def toy_run(toy_data):
    return train(toy_data, toy_config())


class TestTrain:
    def test_finite_stream(self, toy_run):
        _, history = toy_run
        assert len(history) == 10
        assert [r["step"] for r in history] == list(range(10))
        assert all(np.isfinite(r[k]) for r in history for k in METRIC_FIELDS)

    def test_deterministic(self, toy_data, toy_run):
        ckpt, history = train(toy_data, toy_config())
        assert history == toy_run[1]
        assert ckpt.to_bytes() == toy_run[0].to_bytes()

    def test_seed_changes_run(self, toy_data, toy_run):
        cfg = toy_config()
        cfg.seed = 1
        assert train(toy_data, cfg)[1] != toy_run[1]

    def test_lr_follows_schedule(self, toy_run):
        lrs = [r["lr"] for r in toy_run[1]]
        assert lrs[0] == 0.0
        assert lrs[2] == pytest.approx(1e-3)

    def test_momentum_buffers_saved(self, toy_data):
        ckpt, _ = train(toy_data, toy_config(steps=3, momentum=0.9))
        assert set(ckpt.optimizer) == set(ckpt.params)
        assert Checkpoint.from_bytes(ckpt.to_bytes()).optimizer.keys() == ckpt.optimizer.keys()

    def test_image_size_mismatch(self):
        with pytest.raises(ConfigError, match="expects"):
            train(generate_synthetic(2, 10, 16, seed=0), toy_config())

    def test_metrics_csv(self, toy_run, tmp_path):
        path = tmp_path / "m.csv"
        write_metrics_csv(toy_run[1], path)
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(METRIC_FIELDS)
        assert len(lines) == 11


class TestCheckpoint:
    def test_save_load_save_identical(self, toy_run, tmp_path):
        ckpt, _ = toy_run
        path = tmp_path / "a.thck"
        ckpt.save(path)
        again = Checkpoint.load(path)
        again.save(tmp_path / "b.thck")
        assert (tmp_path / "b.thck").read_bytes() == path.read_bytes()
        assert again.config == ckpt.config
        assert again.rng_state == ckpt.rng_state

    def test_rebuilt_model_matches(self, toy_run):
        ckpt, _ = toy_run
        model = ckpt.build_model()
        for name, p in model.named_parameters():
            np.testing.assert_array_equal(p.data, ckpt.params[name])

    def test_single_parameter_set(self, toy_run):
        # both members of a pair are encoded by one set of weights
        names = list(toy_run[0].params)
        assert len(names) == len(set(names))
        assert not any("pair" in n or "siamese" in n for n in names)

    @pytest.mark.parametrize("cut", [3, 20, -1])
    def test_truncated(self, toy_run, cut):
        raw = toy_run[0].to_bytes()
        with pytest.raises(FormatError, match="truncated"):
            Checkpoint.from_bytes(raw[:cut])

    def test_bad_magic(self, toy_run):
        with pytest.raises(FormatError, match="magic"):
            Checkpoint.from_bytes(b"XXXX" + toy_run[0].to_bytes()[4:])


class TestEncode:
    def test_matches_manual_composition(self, toy_run, toy_data):
        ckpt, _ = toy_run
        model = ckpt.build_model()
        images = toy_data.images[:7]
        codes, vectors = encode(ckpt, images, chunk=3, return_vectors=True)
        with no_grad():
            manual = binarize(model(images))
        assert codes == manual
        assert all(c.nbits == 16 for c in codes)
        np.testing.assert_allclose(vectors, model(images).concat().data, rtol=0, atol=1e-12)

    def test_identical_images_identical_codes(self, toy_run, toy_data):
        img = toy_data.images[:1]
        codes = encode(toy_run[0], np.concatenate([img, img]))
        assert codes[0] == codes[1]

    def test_threads_keep_order(self, toy_run, toy_data, monkeypatch):
        single = encode(toy_run[0], toy_data.images, chunk=4)
        monkeypatch.setenv("THASH_THREADS", "3")
        assert encode(toy_run[0], toy_data.images, chunk=4) == single

    def test_shape_mismatch(self, toy_run):
        with pytest.raises(ConfigError):
            encode(toy_run[0], np.zeros((2, 16, 16, 3)))


class TestFullObjectiveGradient:
    def test_two_pair_batch(self):
        rng = np.random.default_rng(5)
        cfg = toy_config()
        model = HashModel(cfg.backbone, cfg.dual_stream, rng)
        for p in model.parameters():
            p.data = p.data + rng.standard_normal(p.shape) * 0.2
        images = rng.random((3, 8, 8, 3))
        batch = SimilarityBatch.from_labels([(0,), (0,), (1,)], pairs=[(0, 1), (1, 2)])

        def objective():
            return total_loss(model(images).streams, batch, cfg.loss)[0]

        model.zero_grad()
        objective().backward()
        for name, p in model.named_parameters():
            coords = rng.choice(p.data.size, size=min(4, p.data.size), replace=False)
            num = numeric_grad(lambda: objective().item(), p.data, coords=coords)
            assert rel_error(p.grad.reshape(-1)[coords], num.reshape(-1)[coords]) < 1e-5, name


class TestConfigFile:
    def test_roundtrip(self):
        cfg = desk_config()
        cfg.loss.gamma = 4.0
        cfg.dual_stream.hash_bits = 32
        assert parse_config(config_to_text(cfg)) == cfg

    def test_every_field_addressable(self):
        text = config_to_text(desk_config())
        for section in ("backbone", "dual_stream", "loss", "sgd", "augment", "split", "train"):
            assert f"[{section}]" in text

    def test_unknown_field_named(self):
        with pytest.raises(ConfigError, match="loss.gama"):
            parse_config("[loss]\ngama = 3\n")

    def test_bad_value_named(self):
        with pytest.raises(ConfigError, match="sgd.total_steps"):
            parse_config("[sgd]\ntotal_steps = many\n")

    def test_infeasible_groups_cite_convergence(self):
        with pytest.raises(ConfigError, match="fails to converge"):
            parse_config("[dual_stream]\nhash_bits = 16\nnum_groups = 3\n")

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="section"):
            parse_config("[optimizer]\nlr = 1\n")

    def test_example_file_parses(self):
        path = Path(__file__).resolve().parents[1] / "configs" / "desk.ini"
        assert parse_config(path.read_text()) == desk_config()

    def test_quantization_gap(self):
        hset = HashVectorSet(Tensor(np.array([[1.0, -0.5]])), [Tensor(np.array([[2.0]]))])
        assert quantization_gap(hset) == pytest.approx(0.5)


@pytest.fixture(scope="module")
def desk_runs():
    """Short desk-scale runs on the synthetic 2-class set, with and without quantization."""
    train_set, _, _ = split_protocol(generate_synthetic(2, 100, 16, seed=0), 10, 25, seed=0)
    runs = {}
    for lam in (0.1, 0.0):
        cfg = desk_config()
        cfg.sgd.total_steps = 400
        cfg.loss.lam = lam
        runs[lam] = train(train_set, cfg)[1]
    return runs


class TestDeskTraining:
    def test_pair_loss_decreases(self, desk_runs):
        bayes = [r["bayes_per_pair"] for r in desk_runs[0.1]]
        assert np.mean(bayes[-100:]) < np.mean(bayes[:100])

    def test_quantization_gap_shrinks(self, desk_runs):
        history = desk_runs[0.1]
        assert history[-1]["quant_gap"] < history[0]["quant_gap"]

    def test_quantization_term_does_work(self, desk_runs):
        assert desk_runs[0.1][0]["quant_gap"] == desk_runs[0.0][0]["quant_gap"]
        assert desk_runs[0.1][-1]["quant_gap"] < desk_runs[0.0][-1]["quant_gap"]
