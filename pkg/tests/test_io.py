import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from chmhd import io
from chmhd import scheme as S
from chmhd.mesh import UNIT_SQUARE, build_mesh


def zero_state(n=1):
    mesh = build_mesh(UNIT_SQUARE, n, n)
    lay = S.Layout(mesh)
    return lay.unpack(np.zeros(lay.size), 0.0)


def test_vtk_two_triangle_mesh(tmp_path):
    path = tmp_path / "zero.vtk"
    io.write_vtk(zero_state(), path)
    lines = path.read_text().splitlines()
    assert lines[0] == "# vtk DataFile Version 3.0"
    assert lines[2] == "ASCII" and lines[3] == "DATASET UNSTRUCTURED_GRID"
    assert lines[4] == "POINTS 4 double"
    assert "CELLS 2 8" in lines and "CELL_TYPES 2" in lines
    i = lines.index("CELL_TYPES 2")
    assert lines[i + 1:i + 3] == ["5", "5"]
    for name in ("phi", "omega", "p"):
        assert f"SCALARS {name} double 1" in lines
    for name in ("velocity", "magnetic"):
        assert f"VECTORS {name} double" in lines
    assert "POINT_DATA 4" in lines


def test_vtk_cells_start_with_vertex_count(tmp_path):
    state = zero_state(3)
    path = tmp_path / "s.vtk"
    io.write_vtk(state, path)
    pts, cells = io.read_vtk_points_cells(path)
    assert np.all(cells[:, 0] == 3)
    assert np.array_equal(cells[:, 1:], state.mesh.triangles)
    assert np.array_equal(pts[:, :2], state.mesh.nodes) and np.all(pts[:, 2] == 0.0)


def _section(lines, header, n):
    i = lines.index(header)
    start = i + 2 if header.startswith("SCALARS") else i + 1
    return [list(map(float, l.split())) for l in lines[start:start + n]]


def test_vtk_field_values(tmp_path, rng):
    state = zero_state(2)
    n = state.mesh.n_nodes
    state.phi.coeffs[:] = rng.normal(size=n)
    state.vel.coeffs[:] = rng.normal(size=state.vel.coeffs.size)
    state.mag.coeffs[:] = rng.normal(size=2 * n)
    path = tmp_path / "s.vtk"
    io.write_vtk(state, path)
    lines = path.read_text().splitlines()
    phi = np.array(_section(lines, "SCALARS phi double 1", n)).ravel()
    assert np.array_equal(phi, state.phi.coeffs)
    vel = np.array(_section(lines, "VECTORS velocity double", n))
    nu = state.vel.space.n_scalar
    assert np.array_equal(vel[:, 0], state.vel.coeffs[:n])
    assert np.array_equal(vel[:, 1], state.vel.coeffs[nu:nu + n])
    assert np.all(vel[:, 2] == 0.0)
    B = np.array(_section(lines, "VECTORS magnetic double", n))
    assert np.array_equal(B[:, 1], state.mag.coeffs[n:])


finite = st.floats(allow_nan=False, allow_infinity=False)


@given(st.lists(st.tuples(st.integers(-10 ** 6, 10 ** 6), finite, finite), min_size=1, max_size=20))
def test_csv_round_trip_is_bit_exact(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("csv") / "t.csv"
    recs = [{"step": a, "x": b, "y": c} for a, b, c in rows]
    io.write_csv(recs, path)
    back = io.read_csv(path)
    assert len(back) == len(recs)
    for r, b in zip(recs, back):
        assert b["step"] == r["step"]
        for k in ("x", "y"):
            assert isinstance(b[k], float)
            assert b[k] == r[k] and math.copysign(1, b[k]) == math.copysign(1, r[k])


def test_csv_header_and_missing_cells(tmp_path):
    path = tmp_path / "t.csv"
    io.write_csv([{"a": 1, "b": np.float64(0.1)}, {"a": 2, "c": True}], path)
    assert path.read_text().splitlines() == ["a,b,c", "1,0.1,", "2,,1"]


def test_metadata_handles_numpy(tmp_path):
    path = tmp_path / "m.json"
    io.write_metadata({"x": np.arange(3), "y": np.float64(2.5), "t": (1, 2), "p": tmp_path}, path)
    doc = json.loads(path.read_text())
    assert doc["x"] == [0, 1, 2] and doc["y"] == 2.5 and doc["t"] == [1, 2]


def test_unwritable_path_is_reported(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(io.OutputError, match="file"):
        io.write_csv([{"a": 1}], blocker / "sub" / "t.csv")
