import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ending import data as D
from ending.errors import ConfigError, DataError, ProposalFormatError


class TestSyntheticGenerator:
    def test_deterministic(self):
        a = D.generate_synthetic_dataset(7, 4, 12, 64)
        b = D.generate_synthetic_dataset(7, 4, 12, 64)
        for image_id in a.image_ids:
            sa, sb = a.load(image_id), b.load(image_id)
            assert np.array_equal(sa.image, sb.image)
            assert np.array_equal(sa.label, sb.label)

    def test_every_image_has_foreground(self, tiny_index):
        for image_id in tiny_index.image_ids:
            assert (tiny_index.load(image_id).label > 0).any()

    def test_class_presence_coverage(self):
        n_images, n_fg = 200, 4
        index = D.generate_synthetic_dataset(7, n_fg, n_images, 64)
        presence = {c: 0 for c in range(1, n_fg + 1)}
        for image_id in index.image_ids:
            # Recount from raw pixels rather than the stored inventory.
            for c in np.unique(index.load(image_id).label):
                if c > 0:
                    presence[int(c)] += 1
        for c, count in presence.items():
            assert count >= n_images / (4 * n_fg), (c, count)

    def test_inventory_matches_pixels(self, tiny_index):
        for image_id in tiny_index.image_ids[:10]:
            label = tiny_index.load(image_id).label
            assert tiny_index.inventory(image_id) == D.class_inventory(label)

    def test_vocabulary_limit(self):
        with pytest.raises(ConfigError):
            D.generate_synthetic_dataset(7, 25, 4, 64)
        with pytest.raises(ConfigError):
            D.generate_synthetic_dataset(7, 1, 4, 64)

    def test_image_range_and_dtype(self, tiny_index):
        s = tiny_index.load(tiny_index.image_ids[0])
        assert s.image.dtype == np.float32
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0


class TestVocLayout:
    def test_export_load_round_trip(self, tiny_index, tmp_path):
        ids = tiny_index.image_ids[:8]
        sub = tiny_index.subset(ids)
        D.export_voc_layout(sub, tmp_path, {"train": ids[:6], "val": ids[6:]}, pad_to=16)
        loaded = D.load_voc_layout(tmp_path)
        assert loaded.image_ids == ids
        assert loaded.splits["train"] == ids[:6]
        for image_id in ids:
            assert loaded.inventory(image_id) == sub.inventory(image_id)
        assert loaded.n_fg_classes == max(max(sub.inventory(i), default=0) for i in ids)

    def test_loaded_proposals_match_oracle(self, tiny_index, tmp_path):
        ids = tiny_index.image_ids[:2]
        D.export_voc_layout(tiny_index.subset(ids), tmp_path, {"train": ids}, pad_to=16)
        loaded = D.load_voc_layout(tmp_path)
        for image_id in ids:
            stored = loaded.proposals(image_id, 16)
            oracle = tiny_index.proposals(image_id, 16)
            assert np.array_equal(stored.masks, oracle.masks)
            assert np.array_equal(stored.valid, oracle.valid)

    def test_empty_split_list(self, tmp_path):
        (tmp_path / "splits").mkdir(parents=True)
        (tmp_path / "splits" / "train.txt").write_text("")
        index = D.load_voc_layout(tmp_path)
        assert index.image_ids == []
        assert index.n_fg_classes == 0

    def test_missing_label_listed(self, tiny_index, tmp_path):
        ids = tiny_index.image_ids[:3]
        D.export_voc_layout(tiny_index.subset(ids), tmp_path, {"train": ids})
        (tmp_path / "labels" / f"{ids[1]}.png").unlink()
        with pytest.raises(DataError, match=ids[1]):
            D.load_voc_layout(tmp_path)

    def test_twentyone_class_root_reports_twenty_fg(self, tmp_path):
        from PIL import Image

        for sub in ("images", "labels", "splits"):
            (tmp_path / sub).mkdir()
        label = np.arange(21, dtype=np.uint8).reshape(3, 7)
        rgb = np.zeros((3, 7, 3), dtype=np.uint8)
        Image.fromarray(rgb, mode="RGB").save(tmp_path / "images" / "x.png")
        Image.fromarray(label, mode="L").save(tmp_path / "labels" / "x.png")
        (tmp_path / "splits" / "train.txt").write_text("x\n")
        assert D.load_voc_layout(tmp_path).n_fg_classes == 20


class TestOracleProposals:
    def test_single_square_two_real_masks(self):
        label = np.zeros((16, 16), dtype=np.int32)
        label[4:8, 4:8] = 1
        props = D.oracle_proposals(label, pad_to=10)
        assert props.n == 10
        assert props.valid.sum() == 2
        assert np.array_equal(props.masks[0], (label == 1).astype(np.uint8))
        assert np.array_equal(props.masks[1], (label == 0).astype(np.uint8))

    def test_all_background_single_mask(self):
        props = D.oracle_proposals(np.zeros((8, 8), dtype=np.int32), pad_to=4)
        assert props.valid.sum() == 1
        assert props.masks[0].all()

    def test_union_covers_image(self, tiny_index):
        for image_id in tiny_index.image_ids[:5]:
            label = tiny_index.load(image_id).label
            props = D.oracle_proposals(label, pad_to=32)
            union = props.masks[props.valid].sum(axis=0)
            assert (union >= 1).all()

    def test_two_components_two_masks(self):
        label = np.zeros((12, 12), dtype=np.int32)
        label[1:3, 1:3] = 1
        label[8:10, 8:10] = 1
        props = D.oracle_proposals(label, pad_to=8)
        assert props.valid.sum() == 3  # two components + background

    def test_pad_to_too_small(self):
        label = np.zeros((12, 12), dtype=np.int32)
        label[1:3, 1:3] = 1
        with pytest.raises(DataError):
            D.oracle_proposals(label, pad_to=1)


class TestProposalFormat:
    @given(st.data())
    @settings(max_examples=25, deadline=None)
    def test_round_trip(self, data):
        n = data.draw(st.integers(1, 5))
        h = data.draw(st.integers(1, 9))
        w = data.draw(st.integers(1, 9))
        masks = np.array(
            data.draw(
                st.lists(
                    st.lists(st.integers(0, 1), min_size=h * w, max_size=h * w),
                    min_size=n,
                    max_size=n,
                )
            ),
            dtype=np.uint8,
        ).reshape(n, h, w)
        valid = np.array(data.draw(st.lists(st.booleans(), min_size=n, max_size=n)))
        props = D.ProposalSet(masks=masks, valid=valid)
        decoded = D.decode_proposals(D.encode_proposals(props))
        assert np.array_equal(decoded.masks, masks)
        assert np.array_equal(decoded.valid, valid)

    def test_encode_decode_encode_stable(self, tiny_index):
        props = tiny_index.proposals(tiny_index.image_ids[0], 16)
        enc = D.encode_proposals(props)
        assert D.encode_proposals(D.decode_proposals(enc)) == enc

    def test_empty_mask_decodes_all_zero(self):
        props = D.ProposalSet(masks=np.zeros((2, 4, 4), dtype=np.uint8), valid=np.array([False, False]))
        decoded = D.decode_proposals(D.encode_proposals(props))
        assert not decoded.masks.any()

    def test_bad_magic_offset_zero(self):
        with pytest.raises(ProposalFormatError) as e:
            D.decode_proposals(b"NOPE" + b"\x00" * 20)
        assert e.value.offset == 0

    def test_truncated_payload_reports_offset(self):
        props = D.ProposalSet(masks=np.ones((1, 4, 4), dtype=np.uint8), valid=np.array([True]))
        enc = D.encode_proposals(props)
        with pytest.raises(ProposalFormatError) as e:
            D.decode_proposals(enc[:-3])
        assert e.value.offset > 0

    def test_run_sum_mismatch_rejected(self):
        import struct

        header = b"CAPR" + struct.pack("<HHHH", 1, 1, 2, 2)
        payload = np.array([3], dtype="<u4").tobytes()  # sums to 3, want 4
        record = struct.pack("<BI", 1, len(payload)) + payload
        with pytest.raises(ProposalFormatError, match="sum"):
            D.decode_proposals(header + record)

    def test_load_speed_100_masks_512(self, tmp_path):
        label = np.zeros((512, 512), dtype=np.int32)
        rng = np.random.Generator(np.random.PCG64(0))
        for c in range(1, 9):  # blobs roughly like real proposals
            cy, cx = rng.integers(60, 450, size=2)
            yy, xx = np.mgrid[0:512, 0:512]
            label[(yy - cy) ** 2 + (xx - cx) ** 2 <= 40**2] = c
        props = D.oracle_proposals(label, pad_to=100)
        path = tmp_path / "bench.capr"
        D.save_proposals(path, props)
        D.load_proposals(path)  # warm-up
        t0 = time.perf_counter()
        loaded = D.load_proposals(path)
        elapsed = time.perf_counter() - t0
        assert loaded.masks.shape == (100, 512, 512)
        assert elapsed < 0.05, f"decode took {elapsed * 1e3:.1f} ms"


class TestAugment:
    def test_deterministic_given_rng_state(self, tiny_index):
        sample = tiny_index.load(tiny_index.image_ids[0])
        props = tiny_index.proposals(sample.image_id, 8)
        out1 = D.augment(sample, props, np.random.Generator(np.random.PCG64(5)), 64)
        out2 = D.augment(sample, props, np.random.Generator(np.random.PCG64(5)), 64)
        assert np.array_equal(out1[0].image, out2[0].image)
        assert np.array_equal(out1[0].label, out2[0].label)
        assert np.array_equal(out1[1].masks, out2[1].masks)

    def test_forced_flip_is_involution(self, tiny_index, rng):
        sample = tiny_index.load(tiny_index.image_ids[1])
        props = tiny_index.proposals(sample.image_id, 8)
        once = D.augment(sample, props, rng, 64, force_scale=1.0, force_flip=True,
                         force_crop=(0, 0))
        twice = D.augment(once[0], once[1], rng, 64, force_scale=1.0, force_flip=True,
                          force_crop=(0, 0))
        assert np.array_equal(twice[0].label, sample.label)
        assert np.allclose(twice[0].image, sample.image, atol=1e-6)
        assert np.array_equal(twice[1].masks, props.masks)

    def test_shapes_stay_aligned(self, tiny_index):
        sample = tiny_index.load(tiny_index.image_ids[2])
        props = tiny_index.proposals(sample.image_id, 8)
        for seed in range(10):
            out_s, out_p = D.augment(
                sample, props, np.random.Generator(np.random.PCG64(seed)), 48
            )
            assert out_s.image.shape == (48, 48, 3)
            assert out_s.label.shape == (48, 48)
            assert out_p.masks.shape == (8, 48, 48)

    def test_scale_cannot_invent_classes(self, tiny_index):
        # Nearest-neighbour label resampling over 100 random draws.
        checked = 0
        for image_id in tiny_index.image_ids[:10]:
            sample = tiny_index.load(image_id)
            props = tiny_index.proposals(image_id, 8)
            before = set(np.unique(sample.label))
            for seed in range(10):
                rng = np.random.Generator(np.random.PCG64(seed))
                out_s, _ = D.augment(sample, props, rng, 64, force_flip=False)
                assert set(np.unique(out_s.label)) <= before
                checked += 1
        assert checked == 100

    def test_small_scale_pads_with_background(self, tiny_index):
        sample = tiny_index.load(tiny_index.image_ids[3])
        props = tiny_index.proposals(sample.image_id, 8)
        rng = np.random.Generator(np.random.PCG64(0))
        out_s, _ = D.augment(sample, props, rng, 64, force_scale=0.5, force_crop=(0, 0))
        assert out_s.label.shape == (64, 64)
        assert (out_s.label[:, 32:] == 0).all()
        assert (out_s.label[32:, :] == 0).all()


class TestReplayMemory:
    def _samples(self, classes_per_sample, start=0):
        out = []
        for i, classes in enumerate(classes_per_sample, start=start):
            label = np.zeros((8, 8), dtype=np.int32)
            for k, c in enumerate(sorted(classes)):
                label[k, :4] = c
            sample = D.LabeledImage(
                image=np.zeros((8, 8, 3), dtype=np.float32),
                label=label,
                image_id=f"m{i:04d}",
            )
            out.append((sample, D.oracle_proposals(label, pad_to=8)))
        return out

    def test_quota_split_two_classes(self, rng):
        memory = D.ReplayMemory(capacity=100)
        samples = self._samples([{1}] * 80 + [{2}] * 80)
        memory = D.update_replay_memory(memory, samples, [1, 2], [1, 2], 1, rng)
        counts = memory.per_class_counts()
        assert counts == {1: 50, 2: 50}
        assert len(memory) == 100

    def test_fewer_candidates_all_kept(self, rng):
        memory = D.ReplayMemory(capacity=100)
        samples = self._samples([{1}] * 3 + [{2}] * 2)
        memory = D.update_replay_memory(memory, samples, [1, 2], [1, 2], 1, rng)
        assert len(memory) == 5

    def test_deterministic(self):
        samples = self._samples([{1}] * 30 + [{2}] * 30)
        outs = []
        for _ in range(2):
            rng = np.random.Generator(np.random.PCG64(9))
            memory = D.update_replay_memory(
                D.ReplayMemory(capacity=10), samples, [1, 2], [1, 2], 1, rng
            )
            outs.append([e.sample.image_id for e in memory.entries])
        assert outs[0] == outs[1]

    def test_capacity_never_exceeded_and_monotone(self, rng):
        memory = D.ReplayMemory(capacity=20)
        sizes = []
        seen = []
        for step, new_classes in enumerate([[1, 2], [3, 4], [5, 6]], start=1):
            seen += new_classes
            samples = self._samples([{c} for c in new_classes for _ in range(30)],
                                    start=100 * step)
            memory = D.update_replay_memory(memory, samples, new_classes, seen, step, rng)
            sizes.append(len(memory))
            assert len(memory) <= 20
            quota_cap = -(-20 // len(seen))  # ceil
            assert all(v <= quota_cap for v in memory.per_class_counts().values())
            assert all(e.origin_step <= step for e in memory.entries)
        assert sizes == sorted(sizes)
        assert sizes[-1] == 20

    def test_capacity_zero_rejected(self, rng):
        with pytest.raises(ConfigError):
            D.update_replay_memory(D.ReplayMemory(capacity=0), [], [1], [1], 1, rng)

    @given(st.lists(st.sampled_from([1, 2, 3]), min_size=1, max_size=40), st.integers(1, 15))
    @settings(max_examples=25, deadline=None)
    def test_capacity_property(self, tags, capacity):
        samples = self._samples([{t} for t in tags])
        rng = np.random.Generator(np.random.PCG64(3))
        memory = D.update_replay_memory(
            D.ReplayMemory(capacity=capacity), samples, [1, 2, 3], [1, 2, 3], 1, rng
        )
        assert len(memory) <= capacity
        quota_cap = -(-capacity // 3)
        assert all(v <= quota_cap for v in memory.per_class_counts().values())
