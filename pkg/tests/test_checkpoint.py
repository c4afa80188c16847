import struct
import zlib

import numpy as np
import pytest

from usr.autograd import Tensor
from usr.checkpoint import Checkpoint, save_checkpoint, load_checkpoint, MAGIC
from usr.errors import CheckpointError, CorruptCheckpointError, IncompatibleCheckpointError
from usr.model import USRModel
from usr.ops import reconstruction_loss
from usr.optim import Adam

from conftest import make_tiny_cfg, make_tiny_sr


@pytest.fixture
def model():
    return USRModel.initialized(make_tiny_cfg())


def stepped_optimizer(model, rng) -> Adam:
    optimizer = Adam(model.parameters(), 1e-3)
    lr = Tensor(rng.uniform_array(3 * 16 * 16).reshape(3, 16, 16))
    hr = Tensor(rng.uniform_array(3 * 32 * 32).reshape(3, 32, 32))
    reconstruction_loss('mse', model(lr), hr).backward()
    optimizer.step()
    return optimizer


class TestFormat:

    def test_layout(self, model):
        raw = Checkpoint.from_model(model).to_bytes()
        assert raw[:4] == MAGIC
        version, count = struct.unpack_from('<II', raw, 4)
        assert version == 1
        assert count == len(model.parameters())
        assert struct.unpack('<I', raw[-4:])[0] == zlib.crc32(raw[4:-4])

    def test_round_trip_is_byte_identical(self, model, tmp_path):
        first, second = tmp_path / 'a.usrc', tmp_path / 'b.usrc'
        save_checkpoint(model, str(first))
        reloaded = USRModel(make_tiny_cfg())
        load_checkpoint(str(first), reloaded)
        save_checkpoint(reloaded, str(second))
        assert first.read_bytes() == second.read_bytes()

    def test_float32_entries(self):
        ckpt = Checkpoint({'w': np.arange(6, dtype=np.float32).reshape(2, 3)})
        back = Checkpoint.from_bytes(ckpt.to_bytes())
        assert back.params['w'].dtype == np.float32
        np.testing.assert_array_equal(back.params['w'], ckpt.params['w'])

    def test_optimizer_state(self, model, rng):
        optimizer = stepped_optimizer(model, rng)
        back = Checkpoint.from_bytes(Checkpoint.from_model(model, optimizer.state).to_bytes())
        assert back.optimizer.step == 1
        assert back.optimizer.lr == 1e-3
        assert set(back.optimizer.m) == {p.name for p in model.parameters()}
        name = 'sr.shallow.weight'
        np.testing.assert_array_equal(back.optimizer.v[name], optimizer.state.v[name])
        assert not any(k.startswith('adam/') for k in back.params)

    def test_snapshot_does_not_follow_optimizer(self, model, rng):
        optimizer = stepped_optimizer(model, rng)
        snapshot = Checkpoint.from_model(model, optimizer.state)
        before = snapshot.optimizer.m['sr.shallow.weight'].copy()
        lr = Tensor(rng.uniform_array(3 * 16 * 16).reshape(3, 16, 16))
        hr = Tensor(np.zeros((3, 32, 32)))
        optimizer.zero_grad()
        reconstruction_loss('mse', model(lr), hr).backward()
        optimizer.step()
        assert snapshot.optimizer.step == 1
        np.testing.assert_array_equal(snapshot.optimizer.m['sr.shallow.weight'], before)


class TestValidation:

    @pytest.fixture
    def raw(self, model) -> bytes:
        return Checkpoint.from_model(model).to_bytes()

    def test_flipped_byte(self, raw):
        damaged = bytearray(raw)
        damaged[len(raw) // 2] ^= 0x40
        with pytest.raises(CorruptCheckpointError):
            Checkpoint.from_bytes(bytes(damaged))

    def test_bad_magic(self, raw):
        with pytest.raises(CorruptCheckpointError):
            Checkpoint.from_bytes(b'USRD' + raw[4:])

    def test_truncated(self, raw):
        with pytest.raises(CorruptCheckpointError):
            Checkpoint.from_bytes(raw[:-10])
        with pytest.raises(CorruptCheckpointError):
            Checkpoint.from_bytes(raw[:6])

    def test_future_version(self, raw):
        payload = struct.pack('<I', 2) + raw[8:-4]
        with pytest.raises(IncompatibleCheckpointError):
            Checkpoint.from_bytes(MAGIC + payload + struct.pack('<I', zlib.crc32(payload)))

    def test_trailing_bytes(self, raw):
        payload = raw[4:-4] + b'\x00\x00'
        with pytest.raises(CorruptCheckpointError):
            Checkpoint.from_bytes(MAGIC + payload + struct.pack('<I', zlib.crc32(payload)))

    def test_shape_mismatch_leaves_model(self, model, tmp_path):
        path = str(tmp_path / 'wide.usrc')
        save_checkpoint(USRModel.initialized(make_tiny_cfg(sr=make_tiny_sr(channels=8))), path)
        before = model.state_dict()
        with pytest.raises(IncompatibleCheckpointError) as info:
            load_checkpoint(path, model)
        assert 'sr.shallow.weight' in info.value.names
        for name, array in model.state_dict().items():
            np.testing.assert_array_equal(array, before[name])

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError) as info:
            load_checkpoint(str(tmp_path / 'absent.usrc'))
        assert info.value.exit_code == 2

    def test_damaged_file_leaves_model(self, model, tmp_path):
        path = tmp_path / 'cut.usrc'
        save_checkpoint(model, str(path))
        path.write_bytes(path.read_bytes()[:-1])
        other = USRModel(make_tiny_cfg())
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(str(path), other)
        assert not np.any(other.state_dict()['sr.shallow.weight'])
