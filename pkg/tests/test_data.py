import io
import zipfile

import numpy as np
import pytest
from PIL import Image

from hebbfw.data import (CharacterDataset, augment_classes, IngestionError, PreprocessConfig, load_omniglot, preprocess,
                         preprocess_batch, read_pack, read_pack_header, synth_glyphs, write_pack)
from hebbfw.fewshot import EpisodeConfig, sample_episode, split_classes


def png_bytes(arr):
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def fake_omniglot(root, n_alpha=2, n_char=3, per_char=4, zipped=False):
    rng = np.random.default_rng(0)
    for split in ("images_background", "images_evaluation"):
        files = {}
        for a in range(n_alpha):
            for c in range(n_char):
                for i in range(per_char):
                    arr = (rng.random((105, 105)) > 0.1).astype(np.uint8) * 255
                    files[f"{split}/{split[:3]}_alpha{a}/character{c + 1:02d}/{i:02d}.png"] = png_bytes(arr)
        if zipped:
            with zipfile.ZipFile(root / f"{split}.zip", "w") as zf:
                for name, raw in files.items():
                    zf.writestr(name, raw)
        else:
            for name, raw in files.items():
                path = root / name
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_bytes(raw)


class TestOmniglot:
    @pytest.mark.parametrize("zipped", [False, True])
    def test_counts_and_order(self, tmp_path, zipped):
        fake_omniglot(tmp_path, zipped=zipped)
        ds = load_omniglot(tmp_path)
        assert len(ds.class_ids) == 12
        assert ds.n_images == 48
        assert ds.class_ids == sorted(ds.class_ids)
        assert ds.extent == (105, 105)
        assert load_omniglot(tmp_path).class_ids == ds.class_ids

    def test_empty_root(self, tmp_path):
        with pytest.raises(IngestionError, match="images_background"):
            load_omniglot(tmp_path)

    def test_corrupt_image_skipped(self, tmp_path, caplog):
        fake_omniglot(tmp_path)
        bad = next(tmp_path.glob("images_background/*/*/*.png"))
        bad.write_bytes(b"not a png")
        ds = load_omniglot(tmp_path)
        assert ds.n_images == 47
        assert ds.skipped == [str(bad)]


class TestSynth:
    def test_reproducible(self):
        a = synth_glyphs(20, 20, 28, seed=7)
        b = synth_glyphs(20, 20, 28, seed=7)
        assert a.n_images == 400
        for cid in a.class_ids:
            assert a.images[cid].tobytes() == b.images[cid].tobytes()

    def test_seed_changes_content(self):
        a = synth_glyphs(3, 2, 28, seed=1)
        b = synth_glyphs(3, 2, 28, seed=2)
        assert a.images["synth/0000"].tobytes() != b.images["synth/0000"].tobytes()

    def test_dark_ink_on_white(self):
        ds = synth_glyphs(5, 3, 28)
        for arr in ds.images.values():
            assert arr.dtype == np.uint8
            assert np.median(arr) == 255
            assert arr.min() < 64

    def test_pixel_baseline_beats_chance(self):
        ds = synth_glyphs(20, 20, 28, seed=7)
        rng = np.random.default_rng(0)
        cfg = EpisodeConfig(k_shot=1, n_query=15)
        accs = []
        for _ in range(50):
            ep = sample_episode(ds.class_ids, ds, cfg, rng)
            s = ep.support_images.reshape(5, -1).astype(float)
            q = ep.query_images.reshape(len(ep.query_images), -1).astype(float)
            d = ((q[:, None] - s[None]) ** 2).sum(-1)
            accs.append((d.argmin(1) == ep.query_labels).mean())
        assert np.mean(accs) > 0.5

    def test_single_image_classes_cannot_make_queries(self):
        ds = synth_glyphs(5, 1, 28)
        with pytest.raises(ValueError):
            sample_episode(ds.class_ids, ds, EpisodeConfig(k_shot=1, n_query=0), np.random.default_rng(0))


class TestClassAugment:
    def test_eight_variants(self):
        ds = synth_glyphs(3, 2, 12)
        out, ids = augment_classes(ds, ["synth/0001"])
        assert len(ids) == 8 and ids[0] == "synth/0001"
        assert len(out.class_ids) == 3 + 7
        arrays = [out.images[i] for i in ids]
        assert len({a.tobytes() for a in arrays}) == 8
        np.testing.assert_array_equal(out.images["synth/0001/r1"], np.rot90(ds.images["synth/0001"], 1, axes=(1, 2)))
        np.testing.assert_array_equal(out.images["synth/0001/r0f"], ds.images["synth/0001"][:, :, ::-1])

    def test_source_untouched(self):
        ds = synth_glyphs(2, 2, 12)
        augment_classes(ds, ds.class_ids)
        assert ds.class_ids == ["synth/0000", "synth/0001"]


class TestPack:
    def test_round_trip(self, tmp_path):
        ds = synth_glyphs(4, 3, 12)
        write_pack(ds, tmp_path / "x.pack")
        back = read_pack(tmp_path / "x.pack")
        assert back.class_ids == ds.class_ids
        assert back.meta == ds.meta
        for cid in ds.class_ids:
            np.testing.assert_array_equal(back.images[cid], ds.images[cid])

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.pack").write_bytes(b"garbage" * 4)
        with pytest.raises(IngestionError):
            read_pack_header(tmp_path / "x.pack")

    def test_truncated(self, tmp_path):
        write_pack(synth_glyphs(2, 2, 8), tmp_path / "x.pack")
        raw = (tmp_path / "x.pack").read_bytes()
        (tmp_path / "x.pack").write_bytes(raw[:-5])
        with pytest.raises(IngestionError):
            read_pack(tmp_path / "x.pack")


class TestPreprocess:
    def glyph(self):
        return synth_glyphs(2, 1, 28).images["synth/0000"][0]

    def test_shape_and_finite(self):
        out = preprocess(self.glyph(), PreprocessConfig(target=84), False)
        assert out.shape == (3, 84, 84) and out.dtype == np.float32
        assert np.isfinite(out).all()

    def test_eval_deterministic(self):
        cfg = PreprocessConfig(target=84)
        np.testing.assert_array_equal(preprocess(self.glyph(), cfg), preprocess(self.glyph(), cfg))

    def test_channels_equal_before_normalisation(self):
        cfg = PreprocessConfig(target=40)
        out = preprocess(self.glyph(), cfg)
        raw = out * np.asarray(cfg.std, dtype=np.float32)[:, None, None] + np.asarray(cfg.mean, dtype=np.float32)[:, None, None]
        np.testing.assert_allclose(raw[0], raw[1], atol=1e-6)
        np.testing.assert_allclose(raw[0], raw[2], atol=1e-6)
        assert not np.allclose(out[0], out[1])

    def test_crop_only_when_no_rotation_or_flip(self):
        cfg = PreprocessConfig(target=28, crop_pad=3, rotation_deg=0, hflip_p=0)
        img = self.glyph()
        out = preprocess(img, cfg, True, np.random.default_rng(5))
        rng = np.random.default_rng(5)
        top, left = rng.integers(0, 7, size=2)
        padded = np.pad(img.astype(np.float32) / 255.0, 3, constant_values=1.0)
        expected = (padded[top:top + 28, left:left + 28] - cfg.mean[0]) / cfg.std[0]
        np.testing.assert_allclose(out[0], expected, atol=1e-6)

    def test_augmentation_uses_given_stream(self):
        cfg = PreprocessConfig(target=28, crop_pad=2)
        a = preprocess_batch(np.stack([self.glyph()] * 3), cfg, True, np.random.default_rng(9))
        b = preprocess_batch(np.stack([self.glyph()] * 3), cfg, True, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)

    def test_training_without_stream_rejected(self):
        with pytest.raises(ValueError):
            preprocess(self.glyph(), PreprocessConfig(target=28), True)

    def test_white_background_fill(self):
        cfg = PreprocessConfig(target=28, crop_pad=0, rotation_deg=30, hflip_p=0)
        blank = np.full((28, 28), 255, dtype=np.uint8)
        out = preprocess(blank, cfg, True, np.random.default_rng(0))
        np.testing.assert_allclose(out[0], (1.0 - cfg.mean[0]) / cfg.std[0], atol=1e-5)
