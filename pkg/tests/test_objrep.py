import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xtrans2cap.objrep import (
    AttributeToggles,
    Box2D,
    Box3D,
    DegenerateBoxError,
    InputProjectionParams,
    ModalityUnavailableError,
    ObjectRecord,
    SceneSample,
    assemble_tokens,
    build_3d_token,
    build_multi_token,
    positional_encoding,
)
from xtrans2cap.vocab import BOS_ID, EOS_ID


def record(rng, with_2d=True, d3d=32, c=18, d2d=32):
    cls = np.zeros(c)
    cls[rng.integers(c)] = 1
    box = Box3D(tuple(rng.uniform(0, 1, 3)), tuple(rng.uniform(0.1, 0.3, 3)))
    if not with_2d:
        return ObjectRecord(rng.normal(size=d3d), cls, box)
    return ObjectRecord(rng.normal(size=d3d), cls, box, rng.normal(size=d2d),
                        Box2D(*rng.uniform(0.2, 0.8, 2), *rng.uniform(0.05, 0.2, 2)))


def scene(rng, m=4, with_2d=True):
    return SceneSample([record(rng, with_2d) for _ in range(m)], 0, [[BOS_ID, 5, EOS_ID]], "s")


box_st = st.builds(
    Box3D,
    st.tuples(*[st.floats(-5, 5, allow_nan=False)] * 3),
    st.tuples(*[st.floats(0.01, 5, allow_nan=False)] * 3),
)


def test_pe_self_reference():
    b = Box3D((0.3, 0.2, 0.1), (1.0, 2.0, 0.5))
    np.testing.assert_array_equal(positional_encoding(b, b), [0, 0, 0, 1, 1, 1])


@settings(max_examples=50)
@given(box_st)
def test_pe_self_reference_any_box(b):
    np.testing.assert_array_equal(positional_encoding(b, b), [0, 0, 0, 1, 1, 1])


def test_pe_hand_substitution():
    t = Box3D((0, 0, 0), (1, 1, 1))
    o = Box3D((2, -1, 0.5), (2, 0.5, 1))
    np.testing.assert_allclose(positional_encoding(t, o), [2, -1, 0.5, 2, 0.5, 1])


def test_degenerate_box_rejected():
    with pytest.raises(DegenerateBoxError):
        Box3D((0, 0, 0), (0, 1, 1))


def test_record_invariants(rng):
    with pytest.raises(ValueError):
        ObjectRecord(np.zeros(4), np.array([1.0, 1.0]), Box3D((0, 0, 0), (1, 1, 1)))
    with pytest.raises(ValueError):
        ObjectRecord(np.zeros(4), np.array([1.0, 0.0]), Box3D((0, 0, 0), (1, 1, 1)), f2d=np.zeros(2))


def test_3d_token_shape_and_determinism(rng):
    p = InputProjectionParams.init(rng, d=128)
    r = record(rng)
    tok = build_3d_token(r, r.b3d, p)
    assert tok.shape == (128,)
    assert tok.tobytes() == build_3d_token(r, r.b3d, p).tobytes()


def test_3d_token_zero_params(rng):
    p = InputProjectionParams.init(rng, d=16)
    for t in p.named().values():
        t.data[...] = 0
    r = record(rng)
    assert not build_3d_token(r, r.b3d, p).any()


def test_multi_token_requires_2d(rng):
    p = InputProjectionParams.init(rng, d=16, d2d=32)
    r = record(rng, with_2d=False)
    with pytest.raises(ModalityUnavailableError):
        build_multi_token(r, r.b3d, p)
    assert build_multi_token(record(rng), r.b3d, p).shape == (16,)


def test_f2d_toggle_changes_multi_token(rng):
    p = InputProjectionParams.init(rng, d=64, d2d=32)
    diffs = 0
    for _ in range(10):
        r = record(rng)
        full = build_multi_token(r, r.b3d, p)
        off = build_multi_token(r, r.b3d, p, AttributeToggles(f2d=False))
        diffs += not np.array_equal(full, off)
    assert diffs == 10


def test_3d_token_ignores_2d_fields(rng):
    p = InputProjectionParams.init(rng, d=32)
    r = record(rng)
    r2 = ObjectRecord(r.f3d, r.cls, r.b3d, rng.normal(size=32), Box2D(0.5, 0.5, 0.1, 0.1))
    assert build_3d_token(r, r.b3d, p).tobytes() == build_3d_token(r2, r.b3d, p).tobytes()


def test_assemble_singleton(rng):
    p = InputProjectionParams.init(rng, d=16)
    s = scene(rng, m=1)
    assert assemble_tokens(s, "3d", p).shape == (1, 16)


def test_assemble_all_on_toggles_equal_default(rng):
    p = InputProjectionParams.init(rng, d=16, d2d=32)
    s = scene(rng)
    a = assemble_tokens(s, "multi", p).data
    b = assemble_tokens(s, "multi", p, AttributeToggles.parse("")).data
    assert a.tobytes() == b.tobytes()


def test_assemble_rows_match_single_tokens(rng):
    p = InputProjectionParams.init(rng, d=16)
    s = scene(rng, m=3)
    toks = assemble_tokens(s, "3d", p).data
    for m, o in enumerate(s.objects):
        np.testing.assert_allclose(toks[m], build_3d_token(o, s.target.b3d, p), rtol=1e-6)


def test_assemble_multi_needs_2d_everywhere(rng):
    p = InputProjectionParams.init(rng, d=16, d2d=32)
    s = scene(rng, with_2d=False)
    with pytest.raises(ModalityUnavailableError):
        assemble_tokens(s, "multi", p)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 7))
def test_assemble_permutation_equivariant(seed, m):
    r = np.random.default_rng(seed)
    params = {"3d": InputProjectionParams.init(r, d=16), "multi": InputProjectionParams.init(r, d=16, d2d=32)}
    s = scene(r, m=m)
    perm = np.concatenate([[0], 1 + r.permutation(m - 1)])
    s2 = SceneSample([s.objects[i] for i in perm], 0, s.references, s.scene_id)
    for modality, p in params.items():
        a = assemble_tokens(s, modality, p).data
        b = assemble_tokens(s2, modality, p).data
        np.testing.assert_array_equal(a[perm], b)


def test_toggle_parsing():
    t = AttributeToggles.parse("-cls, -pe")
    assert not t.cls and not t.pe and t.f3d
    assert t.describe() == "-cls,-pe"
    with pytest.raises(ValueError):
        AttributeToggles.parse("-colour")
