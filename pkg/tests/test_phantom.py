from dataclasses import replace

import numpy as np
import pytest

from cascade3d.errors import ConfigError
from cascade3d.metrics import dice
from cascade3d.morphology import body_mask
from cascade3d.phantom import PhantomSpec, generate, make_case


@pytest.fixture(scope="module")
def cases():
    return generate(PhantomSpec(), 4)


def test_same_seed_is_bit_identical():
    a = make_case(PhantomSpec(seed=3), 2)
    b = make_case(PhantomSpec(seed=3), 2)
    assert a.image.equals(b.image) and a.labels.equals(b.labels)
    c = make_case(PhantomSpec(seed=4), 2)
    assert not np.array_equal(a.image.data, c.image.data)


def test_case_depends_only_on_seed_and_index():
    spec = PhantomSpec()
    assert generate(spec, 2, start=5)[1].image.equals(make_case(spec, 6).image)


def test_every_case_uses_all_classes(cases):
    for c in cases:
        assert set(np.unique(c.labels.data)) == {0, 1, 2, 3}
        assert c.image.dims == (96, 96, 96) and c.labels.spacing == (0.8, 0.8, 0.8)


def test_structures_inside_body(cases):
    for c in cases:
        assert not np.any((c.labels.data > 0) & ~c.body)


def test_body_mask_recovers_body(cases):
    for c in cases:
        region = body_mask(c.image)
        assert dice(region.mask, c.body) > 0.99
        assert 0.3 <= region.voxel_fraction <= 0.5


def test_tube_is_a_small_structure():
    for c in generate(PhantomSpec(), 20):
        frac = (c.labels.data == 3).sum() / c.body.sum()
        assert frac < 0.01


def test_noise_free_foreground_intensity_is_a_function_of_label():
    spec = PhantomSpec(noise_sigma=0.0)
    c = make_case(spec, 0)
    for k, off in enumerate(spec.class_offsets, start=1):
        vals = np.unique(c.image.data[c.labels.data == k])
        assert list(vals) == [np.float32(spec.tissue + off)]
    # background holds only the known unlabelled intensities
    bg = set(np.unique(c.image.data[c.labels.data == 0]).tolist())
    assert bg <= {spec.air, spec.tissue, spec.tissue + spec.spine_offset, spec.gas}


def test_noise_free_volume_is_piecewise_constant():
    c = make_case(PhantomSpec(noise_sigma=0.0), 1)
    assert len(np.unique(c.image.data)) <= 6


def test_decoy_shares_tube_intensity():
    spec = PhantomSpec(noise_sigma=0.0)
    c = make_case(spec, 0)
    bright_bg = (c.labels.data == 0) & (c.image.data == spec.tissue + spec.spine_offset)
    assert bright_bg.sum() > 0


def test_spec_validation():
    with pytest.raises(ConfigError):
        PhantomSpec(num_classes=5)
    with pytest.raises(ConfigError):
        PhantomSpec(dims=(8, 8, 8))
    with pytest.raises(ConfigError):
        PhantomSpec(noise_sigma=-1.0)
    with pytest.raises(ConfigError):
        generate(PhantomSpec(), 0)


def test_structures_that_cannot_fit_are_rejected():
    with pytest.raises(ConfigError, match="does not fit"):
        make_case(replace(PhantomSpec(), large_semi_axes=(0.5, 0.5, 0.5)), 0)


def test_spec_round_trip():
    spec = PhantomSpec(seed=7, noise_sigma=30.0)
    assert PhantomSpec.from_dict(spec.to_dict()) == spec
