import struct

import numpy as np
import pytest

from pharnet.checkpoint import (
    MAGIC,
    CheckpointError,
    load_checkpoint,
    load_encoder_weights,
    save_checkpoint,
    save_encoder_weights,
)
from pharnet.config import desk_config
from pharnet.data import Corpus, synth_corpus
from pharnet.generator import Generator
from pharnet.training import init_state, train_step


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("ck")
    corpus = Corpus.from_manifest(synth_corpus(d / "corpus", 4, 4, 64, 0))
    state = init_state(desk_config(batch_size=2), corpus)
    for _ in range(2):
        train_step(state.stream.next_batch(), state)
        state.step += 1
    state.loss_avg = {"l_total_G": 1.5}
    path = d / "s.ckpt"
    save_checkpoint(state, path)
    return state, path, corpus


def _all_arrays(state):
    out = {}
    for store in state.all_stores():
        for p, t in store.params.items():
            out[("param", p)] = t.data
        for p, b in store.buffers.items():
            out[("buffer", p)] = b
        for p, s in store.adam.items():
            out[("m", p)], out[("v", p)] = s.m, s.v
    return out


def test_round_trip_bit_identity(trained, tmp_path):
    state, path, corpus = trained
    loaded = load_checkpoint(path, corpus)
    a, b = _all_arrays(state), _all_arrays(loaded)
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].dtype == b[k].dtype and a[k].tobytes() == b[k].tobytes(), k
    assert loaded.step == state.step
    assert loaded.loss_avg == state.loss_avg
    assert loaded.config == state.config
    assert [s.adam_step for s in loaded.all_stores()] == [s.adam_step for s in state.all_stores()]
    assert loaded.stream.state_dict() == state.stream.state_dict()
    save_checkpoint(loaded, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_fixed_little_endian_header(trained):
    buf = trained[1].read_bytes()
    assert buf[:4] == MAGIC
    assert struct.unpack("<I", buf[4:8]) == (1,)


def test_bad_magic(trained, tmp_path):
    buf = bytearray(trained[1].read_bytes())
    buf[0] ^= 0xFF
    p = tmp_path / "bad.ckpt"
    p.write_bytes(bytes(buf))
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(p)


def test_truncation_names_tensor_and_counts(trained, tmp_path):
    buf = trained[1].read_bytes()
    p = tmp_path / "short.ckpt"
    p.write_bytes(buf[:-1])
    last = trained[0].all_stores()[-1]
    last_name = list(last.adam)[-1]
    with pytest.raises(CheckpointError, match=rf"tensor '{last_name}' payload: expected \d+ bytes, found \d+"):
        load_checkpoint(p)


def test_version_checked_before_tensors(trained, tmp_path):
    buf = trained[1].read_bytes()
    p = tmp_path / "v2.ckpt"
    # everything after the version field is garbage: only the version error may surface
    p.write_bytes(MAGIC + struct.pack("<I", 2) + b"\x00")
    with pytest.raises(CheckpointError, match="version 2"):
        load_checkpoint(p)
    p.write_bytes(buf[:4] + struct.pack("<I", 99) + buf[8:])
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(p)


def test_trailing_bytes_rejected(trained, tmp_path):
    p = tmp_path / "long.ckpt"
    p.write_bytes(trained[1].read_bytes() + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(p)


def test_architecture_mismatch(trained, tmp_path):
    state = init_state(desk_config(scale=4))
    p = tmp_path / "wide.ckpt"
    save_checkpoint(state, p)
    loaded = load_checkpoint(p)
    assert loaded.config.scale == 4  # config snapshot rebuilds the right architecture


def test_encoder_weight_file(tmp_path):
    a = Generator(desk_config(encoder_seed=1))
    a.init(0)
    save_encoder_weights(a, tmp_path / "enc.bin")
    b = Generator(desk_config(encoder_seed=2))
    b.init(0)
    load_encoder_weights(b, tmp_path / "enc.bin")
    for (pa, ta), (pb, tb) in zip(a.encoder.store, b.encoder.store):
        assert pa == pb and ta.data.tobytes() == tb.data.tobytes()


def test_config_loads_encoder_weights(tmp_path):
    a = Generator(desk_config(encoder_seed=5))
    a.init(0)
    save_encoder_weights(a, tmp_path / "enc.bin")
    state = init_state(desk_config(encoder_weights=str(tmp_path / "enc.bin")))
    for (_, ta), (_, tb) in zip(a.encoder.store, state.generator.encoder.store):
        np.testing.assert_array_equal(ta.data, tb.data)


def test_full_checkpoint_is_not_encoder_file(trained):
    g = Generator(desk_config())
    with pytest.raises(CheckpointError, match="not an encoder weight file"):
        load_encoder_weights(g, trained[1])
