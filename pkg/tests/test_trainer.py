"""Config handling, checkpoint archives, and the two training stages."""

import json

import numpy as np
import pytest
import torch

from stylefield import scene_io, stylizer, trainer
from stylefield.backbone import Backbone, BackboneConfig
from stylefield.errors import FormatError, StateError, ValidationError
from stylefield.trainer import TrainConfig, load_config


TINY_BACKBONE = BackboneConfig(d_feat=8, d_point=16, d_ray=16, view_blocks=1,
                               ray_blocks=1, heads=2, k_samples=4,
                               color_hidden=16)


def _tiny_geo_cfg(**kw):
    base = dict(stage="geometry", steps=3, ray_batch=32, resolution=32,
                k_samples=4, seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.lr == 1e-3
        assert cfg.w_style == 0.7
        assert cfg.w_consistency == 3.5
        assert cfg.content_layers == (2, 3)

    def test_invalid_lr(self):
        with pytest.raises(ValidationError):
            TrainConfig(lr=0.0)

    def test_invalid_stage(self):
        with pytest.raises(ValidationError):
            TrainConfig(stage="both")

    def test_invalid_content_target(self):
        with pytest.raises(ValidationError):
            TrainConfig(content_target="photo2")

    def test_file_and_override_precedence(self, tmp_path, monkeypatch):
        monkeypatch.setenv("STYLEFIELD_LR", "0.5")
        monkeypatch.setenv("STYLEFIELD_SEED", "9")
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"lr": 0.25}))
        cfg = load_config(path, {"epochs": "7"})
        assert cfg.lr == 0.25          # file beats env
        assert cfg.seed == 9           # env beats default
        assert cfg.epochs == 7         # override coerced from string

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"nope": 1}))
        with pytest.raises(ValidationError):
            load_config(path)


class TestArchives:
    def test_backbone_round_trip_bit_exact(self, tmp_path):
        bb = Backbone(TINY_BACKBONE, seed=1)
        trainer.save_backbone(bb, tmp_path / "b.ckpt")
        back = trainer.load_backbone(tmp_path / "b.ckpt")
        for pa, pb in zip(bb.parameters(), back.parameters()):
            assert torch.equal(pa, pb)
        assert back.cfg.to_dict() == TINY_BACKBONE.to_dict()

    def test_tag_mismatch(self, tmp_path):
        hp = stylizer.init_hypernet(seed=0)
        trainer.save_hypernet(hp, tmp_path / "h.ckpt")
        with pytest.raises(FormatError):
            trainer.load_backbone(tmp_path / "h.ckpt")

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(StateError):
            trainer.load_backbone(tmp_path / "nope.ckpt")

    def test_hypernet_round_trip(self, tmp_path):
        hp = stylizer.init_hypernet(seed=2)
        with torch.no_grad():
            for p in hp.net.parameters():
                p.add_(0.125)
        trainer.save_hypernet(hp, tmp_path / "h.ckpt")
        back = trainer.load_hypernet(tmp_path / "h.ckpt")
        for pa, pb in zip(hp.parameters(), back.parameters()):
            assert torch.equal(pa, pb)

    def test_stylevae_round_trip(self, tmp_path):
        styles = scene_io.synth_styles(3, seed=0)
        vae = stylizer.train_style_vae(styles, epochs=3, seed=0)
        trainer.save_stylevae(vae, tmp_path / "v.ckpt")
        back = trainer.load_stylevae(tmp_path / "v.ckpt")
        assert back.trained
        for pa, pb in zip(vae.net.parameters(), back.net.parameters()):
            assert torch.equal(pa, pb)

    def test_bundle_round_trip(self, tmp_path):
        bb = Backbone(TINY_BACKBONE, seed=0)
        styles = scene_io.synth_styles(3, seed=0)
        vae = stylizer.train_style_vae(styles, epochs=2, seed=0)
        hp = stylizer.init_hypernet(seed=0)
        trainer.save_backbone(bb, tmp_path / "b.ckpt")
        trainer.save_stylevae(vae, tmp_path / "v.ckpt")
        trainer.save_hypernet(hp, tmp_path / "h.ckpt")
        trainer.save_bundle(tmp_path / "bundle.json", "b.ckpt", "v.ckpt", "h.ckpt")
        b2, v2, h2 = trainer.load_bundle(tmp_path / "bundle.json")
        assert isinstance(b2, Backbone)
        assert v2.trained

    def test_bundle_bad_tag(self, tmp_path):
        (tmp_path / "bundle.json").write_text(json.dumps({"format": "x"}))
        with pytest.raises(FormatError):
            trainer.load_bundle(tmp_path / "bundle.json")


class TestGeometryPretraining:
    def test_few_view_scene_skipped(self, small_plane_scene):
        bundle, _, _ = small_plane_scene
        two = scene_io.SceneBundle(views=bundle.views[:2], scene_id="two")
        with pytest.warns(UserWarning):
            bb, log = trainer.pretrain_geometry([two, bundle], _tiny_geo_cfg())
        assert len(log) == 3

    def test_all_scenes_skipped(self, small_plane_scene):
        bundle, _, _ = small_plane_scene
        two = scene_io.SceneBundle(views=bundle.views[:2], scene_id="two")
        with pytest.warns(UserWarning):
            with pytest.raises(ValidationError):
                trainer.pretrain_geometry([two], _tiny_geo_cfg())

    def test_log_fields(self, small_plane_scene):
        bundle, _, _ = small_plane_scene
        _, log = trainer.pretrain_geometry([bundle], _tiny_geo_cfg())
        assert {"step", "L_total", "wall_ms"} <= set(log[0])

    def test_seeded_first_step_identical(self, small_plane_scene):
        bundle, _, _ = small_plane_scene
        cfg = _tiny_geo_cfg(steps=1)
        a, la = trainer.pretrain_geometry([bundle], cfg)
        b, lb = trainer.pretrain_geometry([bundle], cfg)
        assert la[0]["L_total"] == lb[0]["L_total"]
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_resume_matches_uninterrupted(self, small_plane_scene, tmp_path):
        bundle, _, _ = small_plane_scene
        cfg = _tiny_geo_cfg(steps=6, dtype="float64")
        _, log_full = trainer.pretrain_geometry([bundle], cfg)

        ckpt = tmp_path / "geo.ckpt"
        trainer.pretrain_geometry([bundle], cfg, checkpoint_path=ckpt,
                                  max_steps=3)
        _, log_resumed = trainer.pretrain_geometry([bundle], cfg,
                                                   resume_path=ckpt)
        assert log_resumed[0]["step"] == 3
        assert abs(log_resumed[0]["L_total"] - log_full[3]["L_total"]) <= 1e-6


@pytest.fixture(scope="module")
def setup(small_plane_scene):
    bundle, flows, masks = small_plane_scene
    cfg = TrainConfig(stage="style", steps=4, seed=0, resolution=32,
                      k_samples=4)
    bb, _ = trainer.pretrain_geometry([bundle], _tiny_geo_cfg(steps=2))
    bb.freeze()
    styles = scene_io.synth_styles(4, seed=0)
    scfg = stylizer.StylizerConfig(d_ray=bb.cfg.d_ray)
    vae = stylizer.train_style_vae(styles, epochs=3, seed=0, cfg=scfg)
    vae.freeze()
    return (bundle, flows, masks), styles, bb, vae, cfg


class TestStylizationTraining:
    def test_requires_frozen_backbone(self, setup):
        scene_data, styles, bb, vae, cfg = setup
        thawed = Backbone(bb.cfg, seed=0)
        with pytest.raises(StateError):
            trainer.train_stylization([scene_data], styles, thawed, vae, cfg)

    def test_requires_frozen_vae(self, setup):
        scene_data, styles, bb, vae, cfg = setup
        warm = stylizer.StyleVAEParams(net=vae.net, cfg=vae.cfg, trained=True)
        with pytest.raises(StateError):
            trainer.train_stylization([scene_data], styles, bb, warm, cfg)

    def test_step0_content_is_zero(self, setup):
        scene_data, styles, bb, vae, cfg = setup
        _, log = trainer.train_stylization([scene_data], styles, bb, vae, cfg)
        assert log[0]["L_content"] == 0.0
        assert len(log) == 4

    def test_backbone_unchanged(self, setup):
        scene_data, styles, bb, vae, cfg = setup
        before = [p.detach().clone() for p in bb.parameters()]
        hp, _ = trainer.train_stylization([scene_data], styles, bb, vae, cfg)
        for pa, pb in zip(before, bb.parameters()):
            assert torch.equal(pa, pb)
        changed = any(
            not torch.equal(pa, pb)
            for pa, pb in zip(stylizer.init_hypernet(hp.cfg, seed=0).parameters(),
                              hp.parameters()))
        assert changed

    def test_no_valid_pairs(self, setup):
        (bundle, flows, masks), styles, bb, vae, cfg = setup
        empty_masks = {k: scene_io.VisibilityMask(
            mask=np.zeros(v.mask.shape, dtype=bool)) for k, v in masks.items()}
        with pytest.raises(ValidationError):
            trainer.train_stylization([(bundle, flows, empty_masks)], styles,
                                      bb, vae, cfg)

    def test_resume_matches_uninterrupted(self, setup, tmp_path):
        scene_data, styles, bb, vae, cfg = setup
        cfg64 = TrainConfig(stage="style", steps=6, seed=0, resolution=32,
                            k_samples=4, dtype="float64")
        bb64, _ = trainer.pretrain_geometry(
            [scene_data[0]], _tiny_geo_cfg(steps=2, dtype="float64"))
        bb64.freeze()
        _, log_full = trainer.train_stylization([scene_data], styles, bb64,
                                                vae, cfg64)
        ckpt = tmp_path / "style.ckpt"
        trainer.train_stylization([scene_data], styles, bb64, vae, cfg64,
                                  checkpoint_path=ckpt, max_steps=3)
        _, log_res = trainer.train_stylization([scene_data], styles, bb64, vae,
                                               cfg64, resume_path=ckpt)
        assert log_res[0]["step"] == 3
        assert abs(log_res[0]["L_total"] - log_full[3]["L_total"]) <= 1e-6


class TestHelpers:
    def test_psnr_zero_error_infinite(self):
        assert trainer.psnr(np.ones((4, 4)), np.ones((4, 4))) == float("inf")

    def test_psnr_value(self):
        a = np.zeros((4, 4))
        b = np.full((4, 4), 0.1)
        assert trainer.psnr(a, b) == pytest.approx(20.0)

    def test_pair_angle(self, plane_scene):
        bundle, _, _ = plane_scene
        cams = bundle.cameras
        assert trainer._pair_angle(cams[0], cams[0]) == pytest.approx(0.0)
        assert trainer._pair_angle(cams[0], cams[7]) > \
            trainer._pair_angle(cams[0], cams[1])

    def test_write_log(self, tmp_path):
        trainer.write_log([{"step": 0, "L_total": 1.0}], tmp_path / "log.jsonl")
        lines = (tmp_path / "log.jsonl").read_text().splitlines()
        assert json.loads(lines[0])["step"] == 0
