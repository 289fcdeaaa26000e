import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xtrans2cap.metrics import Entry, cider_d_scores
from xtrans2cap.objrep import Box3D
from xtrans2cap.synthdata import (
    COLORS,
    INVERSE,
    VOCAB,
    GenConfig,
    GenerationError,
    SplitParseError,
    caption_color,
    generate_scene,
    generate_split,
    project_box,
    read_split,
    relation,
    scene_rng,
    scene_to_json,
    verify_caption,
    write_dataset,
    write_split,
)
from xtrans2cap.vocab import Vocab


def same_scene(a, b):
    return scene_to_json(a) == scene_to_json(b)


def test_same_seed_is_bit_identical(gen_cfg):
    a = generate_scene(scene_rng(3, "train", 9), gen_cfg, "x")
    b = generate_scene(scene_rng(3, "train", 9), gen_cfg, "x")
    assert same_scene(a, b)
    for oa, ob in zip(a.objects, b.objects):
        assert oa.f3d.tobytes() == ob.f3d.tobytes()


def test_different_seeds_differ(gen_cfg):
    a = generate_scene(scene_rng(3, "train", 9), gen_cfg)
    b = generate_scene(scene_rng(4, "train", 9), gen_cfg)
    assert not same_scene(a, b)


def test_references_verify(small_data):
    for split in small_data.values():
        for s in split:
            assert 1 <= len(s.references) <= 3
            for ref in s.references:
                toks = VOCAB.decode(ref)
                assert verify_caption(toks, s)
                assert caption_color(toks) == s.target.latent["color"]


def test_verifier_rejects_wrong_color(small_data):
    s = small_data["train"][0]
    toks = VOCAB.decode(s.references[0])
    wrong = next(c for c in COLORS if c != s.target.latent["color"])
    assert not verify_caption([wrong if t == s.target.latent["color"] else t for t in toks], s)


def test_scene_shape(small_data, gen_cfg):
    for s in small_data["train"]:
        assert gen_cfg.M_range[0] <= len(s.objects) <= gen_cfg.M_range[1]
        assert all(o.has_2d for o in s.objects)
        boxes = [o.b3d for o in s.objects]
        for i in range(len(boxes)):
            c, sz = np.array(boxes[i].center), np.array(boxes[i].size)
            assert (c - sz / 2 >= 0).all() and (c + sz / 2 <= 1).all()
            for j in range(i):
                gap = np.abs(c - np.array(boxes[j].center)) >= (sz + np.array(boxes[j].size)) / 2
                assert gap.any()


def test_placement_failure():
    cfg = GenConfig(M_range=(8, 8), max_retries=1)
    with pytest.raises(GenerationError):
        for i in range(50):
            generate_scene(scene_rng(0, "train", i), cfg)


def _probe_accuracy(sigma, n=600):
    cfg = GenConfig(noise_sigma3d=sigma, seed=11)
    X, y = [], []
    for s in generate_split(cfg, "train", n // 5):
        for o in s.objects:
            X.append(o.f3d)
            y.append(COLORS.index(o.latent["color"]))
    X, y = np.array(X), np.array(y)
    half = len(y) // 2
    A = np.hstack([X, np.ones((len(X), 1))])
    W, *_ = np.linalg.lstsq(A[:half], np.eye(len(COLORS))[y[:half]], rcond=None)
    return float((np.argmax(A[half:] @ W, axis=1) == y[half:]).mean())


def test_linear_probe_clean_vs_noisy():
    assert _probe_accuracy(0.0) == 1.0
    assert _probe_accuracy(1.0) < 1.0


def test_2d_features_carry_color_exactly(small_data):
    for s in small_data["val"]:
        for o in s.objects:
            assert np.argmax(o.f2d[: len(COLORS)]) == COLORS.index(o.latent["color"])


def test_projection_inside_image():
    for c in [(0.1, 0.1, 0.1), (0.9, 0.9, 0.9), (0.5, 0.05, 0.5)]:
        b = project_box(Box3D(c, (0.2, 0.2, 0.2)))
        assert 0 <= b.u - b.w / 2 and b.u + b.w / 2 <= 1 + 1e-12


box_st = st.builds(Box3D, st.tuples(*[st.floats(0, 1)] * 3), st.tuples(*[st.floats(0.05, 0.3)] * 3))


@settings(max_examples=200)
@given(box_st, box_st)
def test_relations_antisymmetric(a, b):
    assert relation(b, a) == INVERSE[relation(a, b)]


def test_relations_antisymmetric_on_generated(small_data):
    for s in small_data["train"]:
        boxes = [o.b3d for o in s.objects]
        for i, a in enumerate(boxes):
            for b in boxes[i + 1:]:
                assert relation(b, a) == INVERSE[relation(a, b)]


def test_relation_axis_dominance():
    t = Box3D((0.5, 0.5, 0.5), (0.1, 0.1, 0.1))
    assert relation(t, Box3D((0.9, 0.6, 0.5), (0.1, 0.1, 0.1))) == "left of"
    assert relation(t, Box3D((0.5, 0.5, 0.1), (0.1, 0.1, 0.1))) == "above"
    assert relation(t, Box3D((0.5, 0.1, 0.5), (0.1, 0.1, 0.1))) == "behind"
    assert relation(t, Box3D((0.55, 0.5, 0.5), (0.1, 0.1, 0.1))) == "next to"
    # exact tie between x and y goes to x
    assert relation(t, Box3D((0.8, 0.8, 0.5), (0.1, 0.1, 0.1))) == "left of"


def test_splits_disjoint(gen_cfg):
    ids = {s: {x.scene_id for x in generate_split(gen_cfg, s, 20)} for s in ("train", "val", "test")}
    assert not ids["train"] & ids["val"] and not ids["train"] & ids["test"] and not ids["val"] & ids["test"]
    a = generate_split(gen_cfg, "train", 3)
    b = generate_split(gen_cfg, "val", 3)
    assert not any(same_scene(x, y) for x in a for y in b)


def test_jsonl_round_trip(tmp_path, small_data):
    path = tmp_path / "train.jsonl"
    write_split(small_data["train"], path)
    back = read_split(path)
    assert len(back) == len(small_data["train"])
    assert all(same_scene(a, b) for a, b in zip(small_data["train"], back))
    np.testing.assert_array_equal(back[0].objects[0].f3d, small_data["train"][0].objects[0].f3d)


def test_truncated_line_names_line(tmp_path, small_data):
    path = tmp_path / "bad.jsonl"
    write_split(small_data["val"][:3], path)
    lines = path.read_text().splitlines()
    lines[1] = lines[1][: len(lines[1]) // 2]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(SplitParseError, match=":2:"):
        read_split(path)


def test_empty_file_is_empty_split(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert read_split(path) == []


def test_echoing_a_reference_is_corpus_maximal(small_data):
    """A captioner that outputs each scene's single reference gets the top score."""
    scenes = small_data["test"]
    echo = [Entry(VOCAB.decode(s.references[0]), [VOCAB.decode(s.references[0])]) for s in scenes]
    scores = cider_d_scores(echo)
    # any other candidate for entry 0 scores no higher
    alt = list(echo)
    alt[0] = Entry(VOCAB.decode(scenes[1].references[0]), echo[0].references)
    assert cider_d_scores(alt)[0] <= scores[0] + 1e-9


def test_write_dataset(tmp_path):
    cfg = GenConfig(n_train=5, n_val=2, n_test=2, seed=1)
    paths = write_dataset(cfg, tmp_path)
    assert len(read_split(paths["train"])) == 5
    v = Vocab.load(paths["vocab"])
    assert v.itos == VOCAB.itos
    first = paths["train"].read_bytes()
    write_dataset(cfg, tmp_path)
    assert paths["train"].read_bytes() == first


def test_config_validation():
    with pytest.raises(ValueError):
        GenConfig(M_range=(1, 3))
    with pytest.raises(ValueError):
        GenConfig(noise_sigma3d=-0.1)
    with pytest.raises(ValueError):
        GenConfig(refs_per_object=4)
