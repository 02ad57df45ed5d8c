import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from histobalance.annotations import AnnotationDocument, Region, rasterize_annotations
from histobalance.errors import ValidationError
from histobalance.subtypes import by_code, by_name


def point_in_polygon(px: float, py: float, polygon) -> bool:
    # independent scalar even-odd ray cast, used as the oracle
    inside = False
    n = len(polygon)
    for i in range(n):
        x0, y0 = polygon[i]
        x1, y1 = polygon[(i + 1) % n]
        if y0 == y1:
            continue
        if (py >= min(y0, y1)) and (py < max(y0, y1)):
            x_cross = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
            if px < x_cross:
                inside = not inside
    return inside


def brute_force_raster(doc, width, height):
    mask = np.zeros((height, width), dtype=np.uint8)
    inst = np.zeros((height, width), dtype=np.int32)
    for region in doc.regions:
        for y in range(height):
            for x in range(width):
                if point_in_polygon(x + 0.5, y + 0.5, region.polygon):
                    mask[y, x] = region.subtype.code
                    inst[y, x] = region.instance_id
    return mask, inst


def square(x0, y0, x1, y1):
    return [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]


def test_empty_document():
    doc = AnnotationDocument(slide_id="s", regions=[])
    mask, inst = rasterize_annotations(doc, 8, 8)
    assert mask.shape == (8, 8) and inst.shape == (8, 8)
    assert mask.max() == 0 and inst.max() == 0


def test_single_square_against_oracle():
    doc = AnnotationDocument(
        slide_id="s",
        regions=[Region(instance_id=7, subtype=by_name("her2_3"), polygon=square(2, 2, 6, 6))],
    )
    mask, inst = rasterize_annotations(doc, 8, 8)
    assert (mask == 4).sum() == 16
    assert (inst == 7).sum() == 16
    assert mask[2:6, 2:6].min() == 4
    ref_mask, ref_inst = brute_force_raster(doc, 8, 8)
    np.testing.assert_array_equal(mask, ref_mask)
    np.testing.assert_array_equal(inst, ref_inst)


def test_overlap_painter_order():
    doc = AnnotationDocument(
        slide_id="s",
        regions=[
            Region(instance_id=1, subtype=by_name("her2_3"), polygon=square(1, 1, 5, 5)),
            Region(instance_id=2, subtype=by_name("her2_0"), polygon=square(3, 3, 7, 7)),
        ],
    )
    mask, inst = rasterize_annotations(doc, 8, 8)
    ref_mask, ref_inst = brute_force_raster(doc, 8, 8)
    np.testing.assert_array_equal(mask, ref_mask)
    np.testing.assert_array_equal(inst, ref_inst)
    # the overlap belongs to the later region
    assert mask[3, 3] == 1 and inst[3, 3] == 2
    assert mask[1, 1] == 4 and inst[1, 1] == 1


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_random_polygons_match_oracle(seed):
    rng = np.random.default_rng(seed)
    regions = []
    for i in range(rng.integers(1, 4)):
        n = int(rng.integers(3, 8))
        cx, cy = rng.uniform(3, 13, 2)
        angles = np.sort(rng.uniform(0, 2 * np.pi, n))
        radii = rng.uniform(1.0, 3.0, n)
        poly = [
            (float(np.clip(cx + r * np.cos(a), 0, 15.9)), float(np.clip(cy + r * np.sin(a), 0, 15.9)))
            for a, r in zip(angles, radii)
        ]
        regions.append(Region(instance_id=i + 1, subtype=by_code(int(rng.integers(1, 6))), polygon=poly))
    doc = AnnotationDocument(slide_id="s", regions=regions)
    mask, inst = rasterize_annotations(doc, 16, 16)
    ref_mask, ref_inst = brute_force_raster(doc, 16, 16)
    np.testing.assert_array_equal(mask, ref_mask)
    np.testing.assert_array_equal(inst, ref_inst)


@given(st.integers(1, 5), st.integers(4, 24))
@settings(max_examples=20, deadline=None)
def test_full_frame_polygon_uniform(code, size):
    doc = AnnotationDocument(
        slide_id="s",
        regions=[Region(instance_id=1, subtype=by_code(code), polygon=square(0, 0, size, size))],
    )
    mask, inst = rasterize_annotations(doc, size, size)
    assert (mask == code).all()
    assert (inst == 1).all()


def test_degenerate_polygon_names_instance():
    doc = AnnotationDocument(
        slide_id="s",
        regions=[Region(instance_id=42, subtype=by_code(1), polygon=[(0, 0), (4, 4)])],
    )
    with pytest.raises(ValidationError, match="42"):
        rasterize_annotations(doc, 8, 8)


def test_out_of_bounds_vertex():
    doc = AnnotationDocument(
        slide_id="s",
        regions=[Region(instance_id=1, subtype=by_code(1), polygon=square(4, 4, 9, 9))],
    )
    with pytest.raises(ValidationError):
        rasterize_annotations(doc, 8, 8)


def test_region_rejects_background_subtype():
    with pytest.raises(ValidationError):
        Region(instance_id=1, subtype=by_code(0), polygon=square(0, 0, 2, 2))


def test_duplicate_instance_ids_rejected():
    regions = [
        Region(instance_id=1, subtype=by_code(1), polygon=square(0, 0, 2, 2)),
        Region(instance_id=1, subtype=by_code(2), polygon=square(3, 3, 5, 5)),
    ]
    with pytest.raises(ValidationError):
        AnnotationDocument(slide_id="s", regions=regions)


def test_json_round_trip(tmp_path):
    doc = AnnotationDocument(
        slide_id="slide_9",
        regions=[
            Region(instance_id=3, subtype=by_name("cis"), polygon=[(0.5, 0.5), (4.25, 1.0), (2.0, 6.75)]),
            Region(instance_id=8, subtype=by_name("her2_1"), polygon=square(1, 1, 3, 3)),
        ],
    )
    path = tmp_path / "ann.json"
    doc.save(path)
    loaded = AnnotationDocument.load(path)
    assert loaded.slide_id == doc.slide_id
    assert len(loaded.regions) == 2
    for a, b in zip(loaded.regions, doc.regions):
        assert a.instance_id == b.instance_id
        assert a.subtype == b.subtype
        assert np.allclose(a.polygon, b.polygon)
