import json
import struct

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hccnet.checkpoint import (
    MAGIC,
    CheckpointFormatError,
    CheckpointManifest,
    CheckpointVersionError,
    MissingTensorError,
    ShapeConflictError,
    apply_tensors,
    load_checkpoint,
    save_checkpoint,
    select_prefix,
)
from hccnet.encoder import build_model
from hccnet.train import stem_adapter


def tiny_model(seed=0, input_channels=4):
    return build_model("F", input_channels, init_seed=seed, channels=4)


def manifest(stage="finetune"):
    return CheckpointManifest(variant="F", stage=stage, step=7, seed=3, config={"channels": 4})


class TestRoundTrip:
    def test_bit_exact(self, tmp_path):
        model = tiny_model()
        path = save_checkpoint(model, manifest(), tmp_path / "m.ckpt")
        tensors, man = load_checkpoint(path)
        state = model.state_dict()
        assert set(tensors) == set(state)
        for k, v in state.items():
            assert tensors[k].numpy().tobytes() == v.numpy().tobytes()
        assert (man.variant, man.stage, man.step, man.seed, man.config) == ("F", "finetune", 7, 3, {"channels": 4})

    @settings(max_examples=25, deadline=None)
    @given(st.dictionaries(
        st.text("abcdefgh.", min_size=1, max_size=8),
        st.lists(st.integers(1, 4), min_size=0, max_size=3),
        min_size=1, max_size=5,
    ))
    def test_arbitrary_stores(self, tmp_path_factory, shapes):
        g = torch.Generator().manual_seed(0)
        store = {k: torch.randn(*s, generator=g) if s else torch.randn((), generator=g) for k, s in shapes.items()}
        path = save_checkpoint(store, manifest(), tmp_path_factory.mktemp("ck") / "s.ckpt")
        back, _ = load_checkpoint(path)
        assert set(back) == set(store)
        for k in store:
            assert torch.equal(back[k], store[k])

    def test_layout(self, tmp_path):
        path = save_checkpoint({"a": torch.ones(2, 3), "b": torch.zeros(4)}, manifest(), tmp_path / "x.ckpt")
        raw = path.read_bytes()
        magic, version, mlen = struct.unpack_from("<4sIQ", raw)
        assert magic == MAGIC == b"LSCK" and version == 1
        meta = json.loads(raw[16 : 16 + mlen])
        idx = {t["name"]: t for t in meta["tensors"]}
        assert idx["a"] == {"name": "a", "shape": [2, 3], "offset": 0}
        assert idx["b"]["offset"] == 24
        assert len(raw) == 16 + mlen + 4 * (6 + 4)

    def test_save_is_deterministic(self, tmp_path):
        a = save_checkpoint(tiny_model(1), manifest(), tmp_path / "a.ckpt").read_bytes()
        b = save_checkpoint(tiny_model(1), manifest(), tmp_path / "b.ckpt").read_bytes()
        assert a == b


class TestErrors:
    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(p)

    def test_truncated_header(self, tmp_path):
        p = tmp_path / "short.ckpt"
        p.write_bytes(b"LSC")
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(p)

    def test_version(self, tmp_path):
        p = save_checkpoint({"a": torch.ones(1)}, manifest(), tmp_path / "v.ckpt")
        raw = bytearray(p.read_bytes())
        struct.pack_into("<I", raw, 4, 9)
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(p)

    def test_corrupted_offset_table(self, tmp_path):
        p = save_checkpoint({"a": torch.ones(3), "b": torch.ones(2)}, manifest(), tmp_path / "c.ckpt")
        raw = p.read_bytes()
        _, _, mlen = struct.unpack_from("<4sIQ", raw)
        meta = json.loads(raw[16 : 16 + mlen])
        meta["tensors"][1]["offset"] = 10_000
        new = json.dumps(meta).encode()
        p.write_bytes(struct.pack("<4sIQ", b"LSCK", 1, len(new)) + new + raw[16 + mlen :])
        with pytest.raises(MissingTensorError):
            load_checkpoint(p)

    def test_overlapping_offsets(self, tmp_path):
        p = save_checkpoint({"a": torch.ones(3), "b": torch.ones(3)}, manifest(), tmp_path / "o.ckpt")
        raw = p.read_bytes()
        _, _, mlen = struct.unpack_from("<4sIQ", raw)
        meta = json.loads(raw[16 : 16 + mlen])
        meta["tensors"][1]["offset"] = 4
        new = json.dumps(meta).encode()
        p.write_bytes(struct.pack("<4sIQ", b"LSCK", 1, len(new)) + new + raw[16 + mlen :])
        with pytest.raises(MissingTensorError):
            load_checkpoint(p)

    def test_errors_are_distinct(self):
        kinds = {CheckpointFormatError, CheckpointVersionError, MissingTensorError, ShapeConflictError}
        assert len(kinds) == 4
        assert not any(issubclass(a, b) for a in kinds for b in kinds if a is not b)


class TestPartialLoads:
    def test_backbone_prefix_only(self, tmp_path):
        src, dst = tiny_model(0), tiny_model(1)
        p = save_checkpoint(select_prefix(src.state_dict(), ("backbone.",)), manifest("backbone-pretrain"),
                            tmp_path / "bb.ckpt")
        before = {k: v.clone() for k, v in dst.state_dict().items()}
        tensors, _ = load_checkpoint(p)
        names = apply_tensors(dst, tensors, prefixes=("backbone.",))
        assert names and all(n.startswith("backbone.") for n in names)
        for k, v in dst.state_dict().items():
            if k.startswith("backbone."):
                assert torch.equal(v, src.state_dict()[k])
            else:
                assert torch.equal(v, before[k])

    def test_missing_tensor_leaves_model_untouched(self):
        model = tiny_model(0)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        partial = select_prefix(tiny_model(1).state_dict(), ("backbone.",))
        partial.pop(sorted(partial)[-1])
        with pytest.raises(MissingTensorError):
            apply_tensors(model, partial, prefixes=("backbone.",))
        assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())

    def test_shape_conflict(self):
        model = tiny_model(0)
        bad = dict(model.state_dict())
        bad["encoder.cls_token"] = torch.zeros(3)
        with pytest.raises(ShapeConflictError):
            apply_tensors(model, bad)

    def test_single_channel_stem_is_inflated(self):
        one = tiny_model(0, input_channels=1)
        four = tiny_model(1, input_channels=4)
        apply_tensors(four, one.state_dict(), prefixes=("backbone.",), adapt=stem_adapter)
        w1 = one.state_dict()["backbone.stem.conv.weight"]
        w4 = four.state_dict()["backbone.stem.conv.weight"]
        assert w4.shape[1] == 4
        torch.testing.assert_close(w4.sum(1, keepdim=True), w1)
