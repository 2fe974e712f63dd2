import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointrt.scene import (
    MaterialParams,
    SceneFormatError,
    SceneValidationError,
    build_scene,
    load_scene,
    save_scene,
    scene_from_binary,
    scene_from_json,
    scene_to_binary,
    scene_to_json,
    validate_scene,
)

MATS = {7: MaterialParams(4.0, 0.1, 0.3), 2: MaterialParams(2.0, 0.0, 0.0)}


def _points():
    return [[0, 0, 0, 0, 0, 2, 11, 7], [1, 0, 0, 0, 0, 1, 3, 2], [0, 1, 0, 0, 0, 1, 11, 2]]


def test_labels_are_compacted_and_normals_renormalized():
    s = build_scene(_points(), transmitters=[[0, 0, 1]], receivers=[[1, 1, 1]], materials=MATS)
    assert s.material_ids == (2, 7)
    assert s.surface_ids == (3, 11)
    assert s.material_labels.tolist() == [1, 0, 0]
    assert s.surface_labels.tolist() == [1, 0, 1]
    np.testing.assert_allclose(np.linalg.norm(s.normals, axis=1), 1.0)
    assert validate_scene(s, require_antennas=True) == []


def test_unknown_material_is_rejected():
    with pytest.raises(SceneValidationError, match="unknown material label 9"):
        build_scene([[0, 0, 0, 0, 0, 1, 0, 9]], materials=MATS)


def test_zero_normal_is_rejected():
    with pytest.raises(SceneValidationError) as err:
        build_scene([[0, 0, 0, 0, 0, 0, 0, 7]], materials=MATS)
    assert err.value.diagnostics[0].index == 0


def test_bad_material_parameters():
    with pytest.raises(SceneValidationError, match="permittivity"):
        build_scene(_points(), materials={7: MaterialParams(0.5, 0, 0), 2: MaterialParams(2, 0, 0)})
    with pytest.raises(SceneValidationError, match="scattering"):
        build_scene(_points(), materials={7: MaterialParams(2, 0, 1.5), 2: MaterialParams(2, 0, 0)})


def test_coplanar_edge_faces_rejected():
    edge = [0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 1, 7, 7]
    with pytest.raises(SceneValidationError, match="parallel"):
        build_scene(_points(), edges=[edge], materials=MATS)


def test_json_format_errors_carry_location(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"points": [[0,0,0,\n0,0,1,0,0]')
    with pytest.raises(SceneFormatError) as err:
        load_scene(p)
    assert err.value.line is not None
    with pytest.raises(SceneFormatError, match="unknown top-level"):
        scene_from_json({"pointz": []})
    with pytest.raises(SceneFormatError, match="8 numbers"):
        scene_from_json({"points": [[0, 0, 0]]})
    with pytest.raises(SceneFormatError, match="conductivity"):
        scene_from_json({"points": [], "materials": {"0": {"relative_permittivity": 2, "scattering_coefficient": 0}}})


def test_binary_errors():
    s = build_scene(_points(), materials=MATS)
    data = scene_to_binary(s)
    with pytest.raises(SceneFormatError, match="truncated"):
        scene_from_binary(data[:-3])
    with pytest.raises(SceneFormatError, match="magic"):
        scene_from_binary(b"XXXX" + data[4:])


def test_json_and_binary_round_trip(tmp_path):
    pts = np.array(_points(), dtype=float)
    edge = [0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 1, 0, 7, 2]
    s = build_scene(pts, edges=[edge], transmitters=[[0.25, 0.5, 1]], receivers=[[1, 1, 1]], materials=MATS)
    save_scene(s, tmp_path / "s.json")
    save_scene(s, tmp_path / "s.bin", binary=True)
    a = load_scene(tmp_path / "s.json")
    b = load_scene(tmp_path / "s.bin")
    assert json.loads((tmp_path / "s.json").read_text()) == scene_to_json(a)
    for other in (a, b):
        np.testing.assert_allclose(other.positions, s.positions, atol=1e-6)
        assert other.material_ids == s.material_ids and other.surface_ids == s.surface_ids
        assert other.materials == s.materials
        assert other.edges[0].material_b == s.edges[0].material_b


finite = st.floats(-100, 100, allow_nan=False, width=32)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(finite, finite, finite, st.integers(0, 5), st.sampled_from([2, 7])), min_size=1,
                max_size=20))
def test_binary_round_trip_property(rows):
    pts = [[x, y, z, 0, 0, 1, s, m] for x, y, z, s, m in rows]
    s = build_scene(pts, materials=MATS)
    back = scene_from_binary(scene_to_binary(s))
    np.testing.assert_array_equal(back.positions, s.positions.astype(np.float32))
    assert back.surface_labels.tolist() == s.surface_labels.tolist()
    assert back.material_labels.tolist() == s.material_labels.tolist()

