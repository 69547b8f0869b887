import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mvstyle import toy
from mvstyle.backbone import ToyBackbone, lora_parameter_count
from mvstyle.imaging import save_image
from mvstyle.losses import LossWeights, recompute_total
from mvstyle.training import (
    Checkpoint,
    ConfigError,
    EpochSampler,
    TrainConfig,
    TrainingDivergedError,
    apply_checkpoint,
    build_condition,
    build_dataset,
    load_config,
    lora_filter,
    resume,
    train,
    trainable_parameters,
    write_config,
)

CFG = TrainConfig(resolution=32, steps=6, rank=2, alpha=2.0)


@pytest.fixture
def ds(toy_scene):
    return build_dataset(*toy_scene, 32)


def _run(ds, cfg=CFG, **kw):
    backbone, encoder, extractor = toy.toy_models()
    return train(ds, cfg, backbone, encoder, extractor, **kw), backbone


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lr, cfg.batch_size, cfg.resolution) == (1e-3, 3, 256)
        assert cfg.weights == LossWeights(1e3, 1e8, 2e4, 1e4)

    @pytest.mark.parametrize("field,value", [("lr", 0), ("batch_size", -1), ("steps", -1), ("rank", 0),
                                             ("condition", "text"), ("max_grad_norm", -1.0)])
    def test_validation_names_field(self, field, value):
        with pytest.raises(ConfigError) as exc:
            TrainConfig(**{field: value})
        assert exc.value.field == field

    def test_dict_round_trip(self):
        cfg = CFG.replace(weights=LossWeights(1, 2, 3, 4), seed=9)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as exc:
            TrainConfig.from_dict({"learning_rate": 1})
        assert exc.value.field == "learning_rate"

    def test_ini_round_trip(self, tmp_path):
        cfg = CFG.replace(weights=LossWeights(1e3, 0.0, 2e4, 1e4), lora_filter="mix,out")
        write_config(cfg, tmp_path / "c.cfg")
        assert load_config(tmp_path / "c.cfg") == cfg

    def test_ini_partial(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("[train]\nsteps = 12\nresolution = 64\n[loss]\nlambda_ca = 0\n")
        cfg = load_config(p)
        assert cfg.steps == 12 and cfg.resolution == 64
        assert cfg.weights == LossWeights(color_alignment=0.0)

    @pytest.mark.parametrize("body,field", [("[train]\nsteps = many\n", "steps"),
                                            ("[loss]\nlambda_x = 1\n", "loss.lambda_x"),
                                            ("[loss]\nlambda_style = -1\n", "weights"),
                                            ("[train]\nbogus = 1\n", "bogus")])
    def test_ini_errors(self, tmp_path, body, field):
        p = tmp_path / "c.cfg"
        p.write_text(body)
        with pytest.raises(ConfigError) as exc:
            load_config(p)
        assert exc.value.field == field

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "none.cfg")

    def test_lora_filter(self):
        f = lora_filter("mix, out")
        assert f("mix") and f("out") and not f("enc1")
        assert lora_filter("all")("anything")


class TestDataset:
    def test_length_and_order(self, toy_scene):
        a, b = build_dataset(*toy_scene, 32), build_dataset(*toy_scene, 32)
        assert len(a) == 4
        assert a.paths == b.paths == sorted(a.paths)

    def test_resizes(self, toy_scene):
        d = build_dataset(*toy_scene, 16)
        assert d[0].shape == (16, 16, 3)
        assert d.style.shape == (16, 16, 3)
        assert d.batch([0, 2]).shape == (2, 16, 16, 3)

    def test_corrupt_file_named(self, tmp_path):
        scene = tmp_path / "scene"
        for i in range(2):
            save_image(torch.rand(8, 8, 3), scene / f"v{i}.png")
        (scene / "v2.png").write_bytes(b"garbage")
        save_image(torch.rand(8, 8, 3), tmp_path / "style.png")
        with pytest.raises(ConfigError) as exc:
            build_dataset(scene, tmp_path / "style.png", 8)
        assert "v2.png" in str(exc.value)

    def test_empty_dir(self, tmp_path, toy_scene):
        (tmp_path / "empty").mkdir()
        with pytest.raises(ConfigError) as exc:
            build_dataset(tmp_path / "empty", toy_scene[1], 32)
        assert exc.value.field == "scene"

    def test_missing_style(self, tmp_path, toy_scene):
        with pytest.raises(ConfigError) as exc:
            build_dataset(toy_scene[0], tmp_path / "nope.png", 32)
        assert exc.value.field == "style" and "nope.png" in str(exc.value)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(1, 5), st.integers(0, 1000))
def test_sampler_visits_each_image_once_per_epoch(n, batch, seed):
    s = EpochSampler(n, batch, seed)
    stream = [i for step in range(4 * n) for i in s.batch(step)]
    for e in range(len(stream) // n):
        assert sorted(stream[e * n : (e + 1) * n]) == list(range(n))
    assert s.batch(3) == EpochSampler(n, batch, seed).batch(3)


class TestTrainableParameters:
    def test_projector_only_before_injection(self):
        backbone, encoder, _ = toy.toy_models()
        cond = build_condition(CFG, encoder, backbone)
        params = trainable_parameters(backbone, cond)
        assert set(params) == set(cond.trainable())
        assert all(n.startswith("projector.") for n in params)

    def test_count_after_training_setup(self, ds):
        ck, backbone = _run(ds, CFG.replace(steps=0))
        hosts = backbone.lora_hosts()
        analytic = sum(min(2, m.weight.shape[0], m.weight[0].numel()) * (m.weight.shape[0] + m.weight[0].numel())
                       for m in hosts.values())
        proj = 16 * 32 + 32 + 32 * 16 + 16
        assert sum(v.size for v in ck.params.values()) == analytic + proj
        assert lora_parameter_count(backbone) == analytic
        base = set(backbone.base_parameters())
        assert not any(n.split(".", 1)[1] in base for n in ck.params if n.startswith("lora."))


class TestTrain:
    def test_zero_steps_identity(self, ds):
        ck, backbone = _run(ds, CFG.replace(steps=0))
        assert ck.step == 0 and ck.log == []
        assert all(np.all(v == 0) for k, v in ck.params.items() if k.endswith(".B"))
        plain = ToyBackbone()
        c = torch.randn(17, 16)
        assert torch.equal(backbone.stylize(ds[0], c), plain.stylize(ds[0], c))

    def test_deterministic(self, ds):
        a, _ = _run(ds)
        b, _ = _run(ds)
        assert a.log == b.log
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_seed_changes_trajectory(self, ds):
        a, _ = _run(ds)
        b, _ = _run(ds, CFG.replace(seed=1))
        assert a.log != b.log

    def test_log_records(self, ds, tmp_path):
        ck, _ = _run(ds, log_path=tmp_path / "l.jsonl")
        lines = [json.loads(x) for x in (tmp_path / "l.jsonl").read_text().splitlines()]
        assert lines == ck.log
        assert [r["step"] for r in lines] == list(range(6))
        for r in lines:
            assert set(r) == {"step", "content", "style", "structure", "color_alignment", "total"}
            assert recompute_total(r, CFG.weights) == r["total"]

    def test_only_trainable_change(self, ds):
        ck, backbone = _run(ds)
        before = ToyBackbone().base_digest()
        assert backbone.base_digest() == before
        assert any(np.any(v != 0) for k, v in ck.params.items() if k.endswith(".B"))

    def test_non_finite_loss(self, ds):
        backbone, encoder, extractor = toy.toy_models()
        with torch.no_grad():
            backbone.out.bias[0] = float("nan")
        with pytest.raises(TrainingDivergedError) as exc:
            train(ds, CFG, backbone, encoder, extractor)
        assert exc.value.step == 0
        assert "total" in exc.value.record

    def test_base_mutation_detected(self, ds):
        backbone, encoder, extractor = toy.toy_models()
        cond = build_condition(CFG, encoder, backbone)
        bump = cond.bump

        def tampering_bump():
            bump()
            with torch.no_grad():
                backbone.enc1.base.bias.add_(1e-3)

        cond.bump = tampering_bump
        with pytest.raises(AssertionError):
            train(ds, CFG.replace(steps=1), backbone, encoder, extractor, condition=cond)

    def test_learned_condition(self, ds):
        ck, _ = _run(ds, CFG.replace(condition="learned"))
        assert "embedding.weight" in ck.params
        assert not any(k.startswith("projector.") for k in ck.params)

    def test_clipping(self, ds):
        a, _ = _run(ds, CFG.replace(max_grad_norm=1e-3))
        b, _ = _run(ds)
        assert a.log[0] == b.log[0] and a.log[-1] != b.log[-1]

    def test_bad_resolution(self, toy_scene):
        with pytest.raises(ConfigError) as exc:
            _run(build_dataset(*toy_scene, 30), CFG.replace(resolution=30))
        assert exc.value.field == "resolution"

    def test_checkpoint_cadence(self, ds, tmp_path):
        _run(ds, CFG.replace(checkpoint_every=2), out_dir=tmp_path)
        names = sorted(p.name for p in tmp_path.glob("checkpoint*.npz"))
        assert names == ["checkpoint.npz", "checkpoint_000002.npz", "checkpoint_000004.npz"]


class TestCheckpoint:
    def test_round_trip(self, ds, tmp_path):
        ck, _ = _run(ds, out_dir=tmp_path)
        back = Checkpoint.load(tmp_path / "checkpoint.npz")
        assert back.step == 6 and back.config == CFG
        assert set(back.params) == set(ck.params)
        for k in ck.params:
            assert np.array_equal(back.params[k], ck.params[k])
        assert back.meta["rank"] == 2 and back.meta["profile"] == "toy-v1"
        assert back.meta["weights"]["style"] == 1e8
        assert back.meta["canny"]["sharpness"] == 50.0
        assert any(k.endswith(".exp_avg_sq") for k in back.optimizer)

    def test_apply_to_fresh_modules(self, ds, tmp_path):
        ck, backbone = _run(ds, out_dir=tmp_path)
        loaded = Checkpoint.load(tmp_path / "checkpoint.npz")
        fresh, encoder, _ = toy.toy_models()
        cond = build_condition(loaded.config, encoder, fresh)
        apply_checkpoint(loaded, fresh, cond)
        trained_cond = build_condition(CFG, encoder, backbone)
        apply_checkpoint(ck, backbone, trained_cond)
        assert torch.equal(fresh.stylize(ds[1], cond(ds.style)), backbone.stylize(ds[1], trained_cond(ds.style)))

    def test_name_mismatch(self, ds):
        ck, _ = _run(ds, CFG.replace(steps=0))
        ck.params.pop("lora.mix.A")
        backbone, encoder, _ = toy.toy_models()
        with pytest.raises(ConfigError):
            apply_checkpoint(ck, backbone, build_condition(CFG, encoder, backbone))


class TestResume:
    def test_split_equals_straight(self, ds, tmp_path):
        straight, _ = _run(ds, CFG.replace(steps=8))
        _run(ds, CFG.replace(steps=8, checkpoint_every=4), out_dir=tmp_path)
        half = Checkpoint.load(tmp_path / "checkpoint_000004.npz")
        backbone, encoder, extractor = toy.toy_models()
        resumed = resume(half, ds, backbone, encoder, extractor, steps=4)
        assert resumed.step == 8
        assert resumed.log == straight.log
        for k in straight.params:
            assert np.array_equal(resumed.params[k], straight.params[k])

    def test_log_continues_file(self, ds, tmp_path):
        ck, _ = _run(ds, CFG.replace(steps=3), out_dir=tmp_path, log_path=tmp_path / "l.jsonl")
        backbone, encoder, extractor = toy.toy_models()
        resume(Checkpoint.load(tmp_path / "checkpoint.npz"), ds, backbone, encoder, extractor, steps=2,
               log_path=tmp_path / "l.jsonl")
        steps = [json.loads(x)["step"] for x in (tmp_path / "l.jsonl").read_text().splitlines()]
        assert steps == [0, 1, 2, 3, 4]

    def test_moments_matter(self, ds, tmp_path):
        _run(ds, CFG.replace(steps=3), out_dir=tmp_path)
        ck = Checkpoint.load(tmp_path / "checkpoint.npz")
        backbone, encoder, extractor = toy.toy_models()
        with_moments = resume(ck, ds, backbone, encoder, extractor, steps=1)
        ck.optimizer = {}
        backbone, encoder, extractor = toy.toy_models()
        fresh = resume(ck, ds, backbone, encoder, extractor, steps=1)
        assert with_moments.log[-1] == fresh.log[-1]  # same parameters going into step 3
        assert any(not np.array_equal(with_moments.params[k], fresh.params[k]) for k in fresh.params)

    def test_profile_mismatch(self, ds):
        ck, _ = _run(ds, CFG.replace(steps=0))
        ck.meta["profile"] = "sd-turbo-2.1"
        backbone, encoder, extractor = toy.toy_models()
        with pytest.raises(ConfigError) as exc:
            resume(ck, ds, backbone, encoder, extractor)
        assert exc.value.field == "profile"
