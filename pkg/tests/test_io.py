import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lgcoamix.core import Rng, SuperpixelMap
from lgcoamix.io import (
    InvalidInput,
    plan_from_dict,
    plan_to_dict,
    read_image,
    read_label,
    read_manifest,
    read_plan,
    read_superpixel_map,
    rle_decode,
    rle_encode,
    write_image,
    write_label,
    write_manifest,
    write_plan,
    write_superpixel_map,
)
from lgcoamix.mixer import bernoulli_select, compose_mix
from lgcoamix.slic import enforce_connectivity


class TestImages:
    def test_round_trip_uint8_grid(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, size=(7, 5, 3)) / 255.0
        write_image(tmp_path / "a.png", img)
        np.testing.assert_array_equal(read_image(tmp_path / "a.png"), img)

    def test_grayscale(self, tmp_path):
        img = np.random.default_rng(1).integers(0, 256, size=(4, 6, 1)) / 255.0
        write_image(tmp_path / "g.png", img)
        out = read_image(tmp_path / "g.png")
        assert out.shape == (4, 6, 1)
        np.testing.assert_array_equal(out, img)

    def test_quantisation(self, tmp_path):
        write_image(tmp_path / "q.png", np.full((2, 2, 3), 0.5))
        assert read_image(tmp_path / "q.png")[0, 0, 0] == 128 / 255

    def test_unreadable(self, tmp_path):
        (tmp_path / "bad.png").write_bytes(b"not a png")
        with pytest.raises(InvalidInput):
            read_image(tmp_path / "bad.png")

    def test_missing(self, tmp_path):
        with pytest.raises(InvalidInput):
            read_image(tmp_path / "nope.png")


class TestSuperpixelMaps:
    def test_round_trip(self, tmp_path):
        smap = enforce_connectivity(np.random.default_rng(2).integers(0, 5, size=(9, 11)), 0.0)
        write_superpixel_map(tmp_path / "m.png", smap)
        assert json.loads((tmp_path / "m.png.json").read_text()) == {"L": smap.L}
        assert read_superpixel_map(tmp_path / "m.png") == smap

    def test_large_ids(self, tmp_path):
        smap = SuperpixelMap(np.arange(256 * 256).reshape(256, 256))
        write_superpixel_map(tmp_path / "big.png", smap)
        assert read_superpixel_map(tmp_path / "big.png") == smap

    def test_too_many_ids(self, tmp_path):
        with pytest.raises(ValueError):
            write_superpixel_map(tmp_path / "big.png", SuperpixelMap(np.arange(256 * 257).reshape(256, 257)))

    def test_sidecar_mismatch(self, tmp_path):
        smap = SuperpixelMap(np.array([[0, 1]]))
        write_superpixel_map(tmp_path / "m.png", smap)
        (tmp_path / "m.png.json").write_text('{"L": 3}')
        with pytest.raises(InvalidInput):
            read_superpixel_map(tmp_path / "m.png")


class TestLabels:
    def test_round_trip(self, tmp_path):
        write_label(tmp_path / "y.json", [0.25, 0.75])
        np.testing.assert_array_equal(read_label(tmp_path / "y.json"), [0.25, 0.75])

    def test_rejects_non_distribution(self, tmp_path):
        (tmp_path / "y.json").write_text('{"probs": [0.5, 0.6]}')
        with pytest.raises(InvalidInput):
            read_label(tmp_path / "y.json")


class TestManifest:
    def test_header_and_relative_paths(self, tmp_path):
        write_manifest(tmp_path / "m.jsonl", [{"image_path": "a.png", "class_index": 1}], 3)
        m = read_manifest(tmp_path / "m.jsonl")
        assert m.num_classes == 3
        assert m.resolve(m.records[0]) == tmp_path / "a.png"

    def test_without_header(self, tmp_path):
        (tmp_path / "m.jsonl").write_text('{"image_path": "a.png", "class_index": 2}\n')
        assert read_manifest(tmp_path / "m.jsonl").num_classes == 3

    @pytest.mark.parametrize("body", ['{"K": 2}\n', '{"K": 2}\n{"image_path": "a.png", "class_index": 2}\n',
                                      '{"image_path": "a.png"}\n', "garbage\n"])
    def test_rejects(self, tmp_path, body):
        (tmp_path / "m.jsonl").write_text(body)
        with pytest.raises(InvalidInput):
            read_manifest(tmp_path / "m.jsonl")


class TestPlans:
    @given(st.lists(st.booleans(), min_size=1, max_size=60))
    def test_rle_round_trip(self, bits):
        mask = np.array(bits).reshape(1, -1)
        runs = rle_encode(mask)
        assert sum(runs) == mask.size
        np.testing.assert_array_equal(rle_decode(runs, mask.shape), mask)

    def test_rle_starts_with_zeros(self):
        assert rle_encode(np.array([[True, True, False]])) == [0, 2, 1]
        assert rle_encode(np.array([[False, True, True]])) == [1, 2]

    def test_rle_wrong_length(self):
        with pytest.raises(InvalidInput):
            rle_decode([2, 2], (3, 3))

    def test_plan_round_trip(self, tmp_path):
        gen = np.random.default_rng(3)
        s1 = enforce_connectivity(gen.integers(0, 4, size=(8, 8)), 0.0)
        s2 = enforce_connectivity(gen.integers(0, 4, size=(8, 8)), 0.0)
        plan = bernoulli_select(s2, 0.5, Rng(1))
        sample = compose_mix(gen.random((8, 8, 3)), gen.random((8, 8, 3)), s1, s2, plan)
        write_plan(tmp_path / "p.json", plan, sample, lambda_area=0.5)
        back, data = read_plan(tmp_path / "p.json")
        np.testing.assert_array_equal(back.mask, plan.mask)
        np.testing.assert_array_equal(back.selected_from_x2, plan.selected_from_x2)
        assert data["provenance"].count("from_x2") == int(sample.from_x2.sum())
        assert plan_from_dict(plan_to_dict(plan)).m == plan.m
