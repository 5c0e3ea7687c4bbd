import numpy as np
import pytest

from iwsgd.rng import SHUFFLE_STREAM, DrawCoordinates, noise_generator, stream


def test_same_coordinates_regenerate_same_numbers():
    coords = DrawCoordinates(seed=123, epoch=2, batch_index=9, example_index=31, sample_index=3)
    first = noise_generator(coords, 4).random(16)
    second = noise_generator(coords, 4).random(16)
    np.testing.assert_array_equal(first, second)


@pytest.mark.parametrize("change", [
    dict(seed=124),
    dict(epoch=3),
    dict(batch_index=10),
    dict(example_index=32),
])
def test_any_coordinate_change_gives_a_different_stream(change):
    base = dict(seed=123, epoch=2, batch_index=9, example_index=31, sample_index=3)
    a = noise_generator(DrawCoordinates(**base), 4).random(8)
    b = noise_generator(DrawCoordinates(**dict(base, **change)), 4).random(8)
    assert np.any(a != b)


def test_samples_of_an_example_share_one_stream():
    base = DrawCoordinates(seed=123, epoch=2, batch_index=9, example_index=31)
    np.testing.assert_array_equal(
        noise_generator(base, 4).random(8),
        noise_generator(base.with_sample(5), 4).random(8)
    )


def test_layer_index_selects_a_different_stream():
    coords = DrawCoordinates(seed=1)
    assert np.any(noise_generator(coords, 1).random(8) != noise_generator(coords, 2).random(8))


def test_auxiliary_streams_do_not_collide_with_draws():
    aux = stream(5, SHUFFLE_STREAM, 0).random(8)
    draw = noise_generator(DrawCoordinates(seed=5), 0).random(8)
    assert np.any(aux != draw)
    np.testing.assert_array_equal(stream(5, SHUFFLE_STREAM, 1).random(4), stream(5, SHUFFLE_STREAM, 1).random(4))


@pytest.mark.parametrize("coords,layer", [
    (DrawCoordinates(seed=-1), 0),
    (DrawCoordinates(seed=0, example_index=2 ** 32), 0),
    (DrawCoordinates(seed=0, sample_index=2 ** 16), 0),
    (DrawCoordinates(seed=0), 2 ** 16),
])
def test_out_of_range_coordinates_are_rejected(coords, layer):
    with pytest.raises(ValueError):
        noise_generator(coords, layer)
