import hashlib

import numpy as np
import pytest

from iahvae import tensor as T
from iahvae.inference import InferenceConfig, infer
from iahvae.model import build_model
from iahvae.rng import Rng
from iahvae.serialization import (Checkpoint, ChecksumError, FormatError, VersionError, decode_checkpoint,
                                  decode_raw, encode_checkpoint, encode_raw, load_checkpoint, load_raw,
                                  read_checkpoint, read_pgm, save_checkpoint, save_raw, write_pgm)
from iahvae.spectral import partition, scale_dofs
from iahvae.tensor import Tensor
from iahvae.training import (Adam, DatasetSpec, TrainConfig, TrainingDiverged, clip_grad_norm, generate_synthetic,
                             train)


@pytest.fixture(scope="module")
def toy():
    return generate_synthetic(DatasetSpec(resolution=8, count=32, test_count=8, seed=1))


class TestData:
    @pytest.mark.parametrize("kind", ["gp-texture", "ellipse-phantom"])
    def test_deterministic(self, kind):
        spec = DatasetSpec(kind=kind, resolution=16, count=8)
        assert generate_synthetic(spec).train.tobytes() == generate_synthetic(spec).train.tobytes()

    @pytest.mark.parametrize("kind", ["gp-texture", "ellipse-phantom"])
    def test_normalized(self, kind):
        d = generate_synthetic(DatasetSpec(kind=kind, resolution=16, count=32))
        assert abs(d.train.mean()) < 1e-6
        assert abs(d.train.std() - 1) < 1e-6

    def test_test_split_uses_train_statistics(self):
        spec = DatasetSpec(resolution=8, count=16, test_count=4)
        d = generate_synthetic(spec)
        raw = generate_synthetic(DatasetSpec(resolution=8, count=16, test_count=0))
        np.testing.assert_array_equal(d.train, raw.train)
        assert d.mean == raw.mean and d.std == raw.std
        assert abs(d.test.mean()) > 1e-9

    def test_seed_changes_data(self):
        a = generate_synthetic(DatasetSpec(resolution=8, count=4, seed=0)).train
        b = generate_synthetic(DatasetSpec(resolution=8, count=4, seed=1)).train
        assert not np.array_equal(a, b)

    def test_texture_spectrum_decays_across_scales(self):
        d = generate_synthetic(DatasetSpec(resolution=32, count=64))
        part = partition(32)
        dofs = scale_dofs(d.train, part)
        # mean energy per bin of each scale, excluding DC (shifted by normalization)
        energy = [np.mean(dofs[k] ** 2) for k in range(1, part.n_scales)]
        assert all(a > b for a, b in zip(energy, energy[1:]))

    def test_phantom_has_sharp_edges(self):
        d = generate_synthetic(DatasetSpec(kind="ellipse-phantom", resolution=32, count=16))
        part = partition(32)
        top = np.mean(scale_dofs(d.train, part)[-1] ** 2)
        t = generate_synthetic(DatasetSpec(kind="gp-texture", resolution=32, count=16))
        assert top > np.mean(scale_dofs(t.train, part)[-1] ** 2)

    def test_bad_kind(self):
        with pytest.raises(ValueError):
            DatasetSpec(kind="cifar")


class TestOptimizer:
    def test_adam_first_step_moves_by_lr(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.array([0.5, -3.0])
        Adam([p], lr=0.1).step()
        np.testing.assert_allclose(p.data, [0.9, -1.9], rtol=1e-6)

    def test_adam_minimizes_quadratic(self):
        p = Tensor(np.array([3.0, -4.0]), requires_grad=True)
        opt = Adam([p], lr=0.1)
        for _ in range(500):
            p.grad = None
            T.backward(T.square(p).sum())
            opt.step()
        assert np.abs(p.data).max() < 1e-2

    def test_clip(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        p.grad = np.array([3.0, 4.0])
        assert clip_grad_norm([p], 1.0) == pytest.approx(5.0)
        np.testing.assert_allclose(p.grad, [0.6, 0.8])


class TestTrain:
    def test_loss_decreases(self, toy):
        m = build_model(resolution=8, layers_per_scale=1, seed=0)
        res = train(m, toy.train, TrainConfig(epochs=6, batch_size=8, lr=3e-3, seed=0))
        assert res.epoch_losses[-1] < res.epoch_losses[0]
        assert res.steps == 6 * 4

    def test_zero_lr_keeps_parameters(self, toy):
        m = build_model(resolution=8, layers_per_scale=1, seed=0)
        before = m.state()
        train(m, toy.train, TrainConfig(epochs=1, batch_size=8, lr=0.0))
        for k, v in m.state().items():
            np.testing.assert_array_equal(v, before[k])

    def test_fixed_seed_reproduces_curve(self, toy):
        curves = []
        for _ in range(2):
            m = build_model(resolution=8, layers_per_scale=1, seed=0)
            curves.append(train(m, toy.train, TrainConfig(epochs=2, batch_size=8, lr=1e-3, seed=5)).step_losses)
        assert curves[0] == curves[1]

    def test_divergence_restores_and_checkpoints(self, toy, tmp_path):
        m = build_model(resolution=8, layers_per_scale=1, seed=0)
        before = m.state()
        bad = toy.train.copy()
        bad[3, 0, 0] = 1e200  # squared error overflows
        path = tmp_path / "last.iahk"
        with pytest.warns(RuntimeWarning), pytest.raises(TrainingDiverged):
            train(m, bad, TrainConfig(epochs=1, batch_size=32, lr=1e-3), checkpoint_path=path)
        for k, v in m.state().items():
            np.testing.assert_array_equal(v, before[k])
        assert path.exists()

    def test_resolution_mismatch(self, toy):
        with pytest.raises(ValueError):
            train(build_model(resolution=16), toy.train, TrainConfig(epochs=1))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(clip_norm=0)

    def test_config_lines(self):
        c = TrainConfig(epochs=3, lr=1e-3)
        assert TrainConfig.from_dict(dict(l.split("=", 1) for l in c.to_lines(prefix=""))) == c


class TestRaw:
    def test_round_trip(self, tmp_path):
        a = Rng(1).normal((3, 4, 5))
        save_raw(a, tmp_path / "a.iaht")
        b = load_raw(tmp_path / "a.iaht")
        assert b.tobytes() == a.tobytes() and b.shape == a.shape

    def test_layout(self):
        blob = encode_raw(np.array([[1.0, 2.0]]))
        assert blob[:4] == b"IAHT"
        assert blob[4:6] == bytes([1, 2])
        assert blob[6:14] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
        assert len(blob) == 14 + 16 + 4

    def test_scalar(self):
        assert decode_raw(encode_raw(np.float64(2.5))).shape == ()

    def test_wrong_magic(self):
        blob = bytearray(encode_raw(np.ones(2)))
        blob[:4] = b"XXXX"
        with pytest.raises(FormatError):
            decode_raw(bytes(blob))

    def test_shape_payload_mismatch(self):
        import struct
        import zlib
        body = b"IAHT" + bytes([1, 1]) + struct.pack("<I", 3) + np.ones(2).tobytes()
        with pytest.raises(FormatError, match="payload"):
            decode_raw(body + struct.pack("<I", zlib.crc32(body)))

    def test_corruption(self):
        blob = bytearray(encode_raw(np.ones(4)))
        blob[10] ^= 1
        with pytest.raises(ChecksumError):
            decode_raw(bytes(blob))

    def test_newer_version(self):
        import struct
        import zlib
        body = b"IAHT" + bytes([9, 1]) + struct.pack("<I", 1) + np.ones(1).tobytes()
        with pytest.raises(VersionError):
            decode_raw(body + struct.pack("<I", zlib.crc32(body)))


class TestCheckpoint:
    def test_save_load_save_identical(self, tmp_path):
        m = build_model(resolution=8, layers_per_scale=1, zero_init=False, seed=2)
        p1, p2 = tmp_path / "a.iahk", tmp_path / "b.iahk"
        save_checkpoint(m, p1, step=7, rng_state=Rng(1).get_state())
        m2, ck = load_checkpoint(p1)
        assert ck.step == 7
        assert Rng.from_state(ck.header["rng_state"]).normal(3).tolist() == Rng(1).normal(3).tolist()
        write_ck = Checkpoint(ck.header, m2.state())
        p2.write_bytes(encode_checkpoint(write_ck))
        assert p1.read_bytes() == p2.read_bytes()

    def test_same_inference_after_reload(self, tmp_path):
        m = build_model(resolution=8, layers_per_scale=1, zero_init=False, seed=2)
        save_checkpoint(m, tmp_path / "m.iahk")
        m2, _ = load_checkpoint(tmp_path / "m.iahk")
        x = Rng(3).normal((1, 8, 8))
        a = infer(m, x, InferenceConfig(n_iter=2), seed=1)
        b = infer(m2, x, InferenceConfig(n_iter=2), seed=1)
        assert a.x_hat.tobytes() == b.x_hat.tobytes()

    def test_truncated(self, tmp_path):
        m = build_model(resolution=4, layers_per_scale=1)
        save_checkpoint(m, tmp_path / "m.iahk")
        data = (tmp_path / "m.iahk").read_bytes()
        (tmp_path / "t.iahk").write_bytes(data[:-100])
        with pytest.raises(ChecksumError):
            read_checkpoint(tmp_path / "t.iahk")

    def test_newer_version(self, tmp_path):
        m = build_model(resolution=4, layers_per_scale=1)
        save_checkpoint(m, tmp_path / "m.iahk")
        data = bytearray((tmp_path / "m.iahk").read_bytes())
        data[4] = 2
        with pytest.raises(VersionError):
            decode_checkpoint(bytes(data))

    def test_fixed_seed_gives_identical_checkpoint(self, tmp_path, toy):
        digests = []
        for i in range(2):
            m = build_model(resolution=8, layers_per_scale=1, seed=0)
            train(m, toy.train, TrainConfig(epochs=1, batch_size=16, lr=1e-3, seed=0),
                  checkpoint_path=tmp_path / f"{i}.iahk")
            digests.append(hashlib.sha256((tmp_path / f"{i}.iahk").read_bytes()).hexdigest())
        assert digests[0] == digests[1]


class TestPgm:
    def test_round_trip(self, tmp_path):
        img = np.linspace(0, 1, 12).reshape(3, 4)
        write_pgm(img, tmp_path / "a.pgm")
        data = (tmp_path / "a.pgm").read_bytes()
        assert data.startswith(b"P5\n4 3\n65535\n")
        np.testing.assert_allclose(read_pgm(tmp_path / "a.pgm") / 65535, img, atol=1e-5)

    def test_rejects_3d(self, tmp_path):
        with pytest.raises(FormatError):
            write_pgm(np.zeros((2, 2, 2)), tmp_path / "x.pgm")
