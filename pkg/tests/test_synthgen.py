# tests/test_synthgen.py

import numpy as np
import pytest
from pydantic import ValidationError

from scene_text_pipeline.config import RenderRanges, RenderSettings
from scene_text_pipeline.services import imaging
from scene_text_pipeline.services.errors import (
    EmptyVocabulary,
    InvalidLabel,
    InvalidManifest,
    InvalidVocabulary,
    MissingGlyph,
    OutOfAlphabet,
    UsageError,
    WordTooWide,
)
from scene_text_pipeline.services.synthgen import (
    DatasetGenerator,
    DatasetManifest,
    LabelMap,
    RenderSpec,
    Vocabulary,
    build_label_map,
    derive_seed,
    generate_dataset,
    load_background_pool,
    load_glyph_atlas,
    load_label_map,
    load_manifest,
    load_vocabulary,
    render_word,
    sample_render_spec,
    save_label_map,
    splitmix64,
    write_manifest,
)


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# ---------------- Vocabulary ----------------
def test_load_vocabulary_drops_blank_lines(tmp_path):
    path = tmp_path / "v.txt"
    path.write_text("abc\n\nde\n", encoding="utf-8")
    assert load_vocabulary(path).words == ("abc", "de")


def test_load_vocabulary_normalizes_to_nfc(tmp_path):
    path = tmp_path / "v.txt"
    path.write_text("cafe\u0301\n", encoding="utf-8")
    assert load_vocabulary(path).words == ("caf\u00e9",)


def test_empty_vocabulary(tmp_path):
    path = tmp_path / "v.txt"
    path.write_text("", encoding="utf-8")
    with pytest.raises(EmptyVocabulary):
        load_vocabulary(path)


def test_invalid_utf8(tmp_path):
    path = tmp_path / "v.txt"
    path.write_bytes(b"ab\xff\xfe\n")
    with pytest.raises(InvalidVocabulary):
        load_vocabulary(path)


def test_words_with_tabs_are_rejected(tmp_path):
    path = tmp_path / "v.txt"
    path.write_text("a\tb\n", encoding="utf-8")
    with pytest.raises(InvalidVocabulary):
        load_vocabulary(path)


# ---------------- Label map ----------------
def test_label_map_sorted_codepoints():
    labels = build_label_map(Vocabulary(("ba", "ab")), "")
    assert labels.as_dict() == {"a": 1, "b": 2}
    assert labels.num_classes == 3


def test_label_map_punctuation_sorts_first():
    assert build_label_map(Vocabulary(("a",)), ".").as_dict() == {".": 1, "a": 2}


def test_single_label_has_two_classes():
    assert build_label_map(Vocabulary(("aaa",)), "").num_classes == 2


def test_encode_decode():
    labels = LabelMap(("a", "b"))
    assert labels.encode("ab") == [1, 2]
    assert labels.decode([2, 1, 1]) == "baa"
    with pytest.raises(OutOfAlphabet):
        labels.encode("abc")
    with pytest.raises(InvalidLabel):
        labels.decode([0])


def test_label_map_file_round_trip(tmp_path):
    labels = LabelMap(("-", "a", "क"))
    save_label_map(labels, tmp_path / "labels.tsv")
    assert (tmp_path / "labels.tsv").read_text(encoding="utf-8").splitlines()[2] == "3\tU+0915"
    assert load_label_map(tmp_path / "labels.tsv") == labels
    assert LabelMap.from_compact(labels.to_compact()) == labels


def test_label_map_rejects_gaps():
    with pytest.raises(InvalidLabel):
        LabelMap.from_tsv("1\tU+0061\n3\tU+0062\n")


# ---------------- Render parameters ----------------
def test_degenerate_ranges_give_fixed_spec(rng):
    ranges = RenderRanges.fixed(glyph_scale=1.2, rotation_deg=2.0, kerning=-0.5, noise_sigma=0.03)
    spec = sample_render_spec(rng, ranges)
    assert spec.glyph_scale == 1.2
    assert spec.rotation_deg == 2.0
    assert spec.kerning == -0.5
    assert spec.noise_sigma == 0.03
    assert spec.corner_jitter == ((0.0, 0.0),) * 4
    assert spec.background_mode == "uniform"


def test_same_seed_same_spec():
    ranges = RenderRanges()
    a = sample_render_spec(np.random.default_rng(9), ranges, pool_size=3)
    b = sample_render_spec(np.random.default_rng(9), ranges, pool_size=3)
    assert a == b


def test_rotation_is_uniform_within_range():
    ranges = RenderRanges(rotation_deg=(-5.0, 5.0))
    rng = np.random.default_rng(0)
    angles = np.array([sample_render_spec(rng, ranges).rotation_deg for _ in range(10_000)])
    assert angles.min() >= -5.0 and angles.max() <= 5.0
    assert abs(angles.mean()) <= 0.5


def test_inverted_range_is_rejected():
    with pytest.raises(ValidationError):
        RenderRanges(kerning=(2.0, 1.0))


def test_crop_mode_needs_a_pool(rng):
    ranges = RenderRanges()
    specs = [sample_render_spec(rng, ranges, pool_size=0, background_crop_probability=1.0) for _ in range(20)]
    assert all(s.background_mode == "uniform" for s in specs)
    assert all(s.texture_strength == 0.0 for s in specs)


# ---------------- Rendering ----------------
def test_identity_rendering_places_bitmap(atlas):
    image, labels = render_word("a", RenderSpec(), atlas)
    bitmap = atlas.glyph("a").bitmap
    h, w = bitmap.shape
    assert image.shape == (h + 8, 21)
    np.testing.assert_array_equal(image[4:4 + h, 4:4 + w], 1.0 - bitmap)
    outside = np.ones_like(image, dtype=bool)
    outside[4:4 + h, 4:4 + w] = False
    assert np.all(image[outside] == 1.0)
    assert labels == []


def test_render_returns_label_ids(atlas):
    _, labels = render_word("ab", RenderSpec(), atlas, label_map=LabelMap(("a", "b")))
    assert labels == [1, 2]


def test_render_is_deterministic(atlas, rng):
    pool = [rng.uniform(0.5, 1.0, size=(30, 90))]
    spec = RenderSpec(
        rotation_deg=2.0, skew_deg=-4.0, corner_jitter=((1.0, 0.5), (-1.0, 0.0), (0.5, 0.5), (0.0, -1.0)),
        background_mode="crop", background_offset=(0.3, 0.6), texture_strength=0.4, noise_sigma=0.05, noise_seed=77,
        stroke_thickness=1,
    )
    a, _ = render_word("hold", spec, atlas, pool)
    b, _ = render_word("hold", spec, atlas, pool)
    assert a.tobytes() == b.tobytes()
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_stroke_thickness_adds_ink(atlas):
    thin, _ = render_word("ox", RenderSpec(), atlas)
    thick, _ = render_word("ox", RenderSpec(stroke_thickness=1), atlas)
    assert (1.0 - thick).sum() > (1.0 - thin).sum()


def test_crop_background_uses_pool(atlas, rng):
    pool = [rng.uniform(0.0, 1.0, size=(40, 120))]
    image, _ = render_word("c", RenderSpec(background_mode="crop"), atlas, pool)
    assert image[0].std() > 0.0


def test_missing_glyph_names_codepoint(atlas):
    with pytest.raises(MissingGlyph, match="U\\+0071"):
        render_word("aq", RenderSpec(), atlas)


def test_word_too_wide(atlas):
    with pytest.raises(WordTooWide):
        render_word("abcdeh", RenderSpec(), atlas, max_width=20)


# ---------------- Seeds ----------------
def test_splitmix64_reference_value():
    assert splitmix64(0) == 0xE220A8397B1DCDAF


def test_derived_seeds_differ():
    seeds = {derive_seed(7, i) for i in range(1000)}
    assert len(seeds) == 1000
    assert derive_seed(7, 0) != derive_seed(8, 0)


# ---------------- Atlas / backgrounds ----------------
def test_atlas_round_trip(atlas, atlas_dir):
    loaded = load_glyph_atlas(atlas_dir)
    assert set(loaded.glyphs) == set(atlas.glyphs)
    g = loaded.glyph("k")
    assert g.advance == atlas.glyph("k").advance
    assert np.max(np.abs(g.bitmap - atlas.glyph("k").bitmap)) <= 1 / 510 + 1e-12


def test_atlas_index_format(atlas_dir):
    first = (atlas_dir / "atlas.idx").read_text(encoding="utf-8").splitlines()[0]
    code, bitmap, advance, voffset = first.split("\t")
    assert code.startswith("U+") and bitmap.endswith(".pgm")
    float(advance), int(voffset)


def test_malformed_atlas_index(tmp_path):
    (tmp_path / "atlas.idx").write_text("U+0061\tonly-two-fields\n", encoding="utf-8")
    with pytest.raises(InvalidManifest):
        load_glyph_atlas(tmp_path)


def test_background_pool(backgrounds_dir):
    pool = load_background_pool(backgrounds_dir)
    assert len(pool) == 3
    assert load_background_pool(None) == []


# ---------------- Datasets ----------------
def test_generation_is_reproducible(tmp_path, atlas):
    vocab = Vocabulary(("cab", "bad", "hold"))
    generate_dataset(vocab, 3, 7, tmp_path / "a", atlas)
    generate_dataset(vocab, 3, 7, tmp_path / "b", atlas)
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_parallel_generation_matches_serial(tmp_path, atlas, backgrounds_dir):
    vocab = Vocabulary(("cab", "bad", "hold", "text"))
    pool = load_background_pool(backgrounds_dir)
    generate_dataset(vocab, 8, 3, tmp_path / "serial", atlas, bg_pool=pool, threads=1)
    generate_dataset(vocab, 8, 3, tmp_path / "parallel", atlas, bg_pool=pool, threads=4)
    assert tree_bytes(tmp_path / "serial") == tree_bytes(tmp_path / "parallel")


def test_every_text_is_a_vocabulary_word(tmp_path, atlas):
    words = ("cab", "bad", "hold", "rope", "text", "lint", "zip")
    manifest = generate_dataset(Vocabulary(words), 1000, 5, tmp_path / "d", atlas)
    assert set(manifest.texts) <= set(words)
    assert len(set(manifest.texts)) == len(words)


def test_consecutive_images_differ(tmp_path, atlas):
    manifest = generate_dataset(Vocabulary(("cab",)), 2, 1, tmp_path / "d", atlas)
    first = imaging.load_pgm(manifest.image_path(0))
    second = imaging.load_pgm(manifest.image_path(1))
    assert first.shape != second.shape or not np.array_equal(first, second)


def test_count_must_be_positive(tmp_path, atlas):
    with pytest.raises(UsageError):
        generate_dataset(Vocabulary(("cab",)), 0, 1, tmp_path / "d", atlas)


def test_atlas_must_cover_vocabulary(tmp_path, atlas):
    with pytest.raises(MissingGlyph):
        generate_dataset(Vocabulary(("quiz",)), 2, 1, tmp_path / "d", atlas)


def test_manifest_files(small_dataset):
    root = small_dataset.root
    lines = (root / "manifest.tsv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "# base_seed = 11"
    assert lines[1].startswith("# config_hash = ")
    assert (root / "labels.tsv").is_file()
    assert (root / "render_config.cfg").is_file()
    loaded = load_manifest(root)
    assert loaded.records == small_dataset.records
    assert loaded.base_seed == 11
    assert loaded.config_hash == small_dataset.config_hash


def test_config_hash_tracks_ranges(atlas):
    vocab = Vocabulary(("cab",))
    labels = build_label_map(vocab)
    a = DatasetGenerator(vocab, atlas, labels, RenderRanges(), RenderSettings())
    b = DatasetGenerator(vocab, atlas, labels, RenderRanges(skew_deg=(-1.0, 1.0)), RenderSettings())
    assert a.config_hash != b.config_hash


def test_manifest_missing_image(tmp_path):
    write_manifest(DatasetManifest(tmp_path, [("images/000000.pgm", "cab")]), tmp_path / "manifest.tsv")
    with pytest.raises(InvalidManifest):
        load_manifest(tmp_path)
    assert len(load_manifest(tmp_path, verify_images=False)) == 1


def test_manifest_malformed_line(tmp_path):
    (tmp_path / "manifest.tsv").write_text("images/a.pgm no tab here\n", encoding="utf-8")
    with pytest.raises(InvalidManifest):
        load_manifest(tmp_path, verify_images=False)


def test_manifest_text_is_normalized(tmp_path):
    (tmp_path / "manifest.tsv").write_text("a.pgm\tcafe\u0301\n", encoding="utf-8")
    assert load_manifest(tmp_path, verify_images=False).texts == ["caf\u00e9"]
