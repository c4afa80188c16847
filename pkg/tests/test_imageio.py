import numpy as np
import pytest

from usr.errors import DataError, DimensionError
from usr.imageio import ImageBuffer, decode_ppm, encode_ppm, read_ppm, write_ppm


class TestPPM:

    def test_white_pixel(self):
        img = decode_ppm(b'P6\n1 1\n255\n' + bytes([255, 255, 255]))
        assert img.shape == (3, 1, 1)
        np.testing.assert_array_equal(img.data, 1.0)

    def test_header_comments(self):
        img = decode_ppm(b'P6\n# made by hand\n2 1\n# depth\n255\n' + bytes([0, 51, 255, 1, 2, 3]))
        assert img.shape == (3, 1, 2)
        assert img.data[1, 0, 0] == 51 / 255

    def test_sixteen_bit_unsupported(self):
        with pytest.raises(DataError, match='maxval'):
            decode_ppm(b'P6\n1 1\n65535\n' + bytes(6))

    def test_wrong_magic(self):
        with pytest.raises(DataError):
            decode_ppm(b'P3\n1 1\n255\n255 255 255\n')

    def test_truncated_raster(self):
        with pytest.raises(DataError, match='truncated'):
            decode_ppm(b'P6\n2 2\n255\n' + bytes(5))

    def test_eight_bit_round_trip(self, tmp_path, rng):
        values = np.array([rng.randint(0, 255) for _ in range(3 * 5 * 4)], dtype=np.float64).reshape(3, 5, 4)
        img = ImageBuffer(values / 255.0)
        path = str(tmp_path / 'sub' / 'img.ppm')
        write_ppm(img, path)
        np.testing.assert_array_equal(read_ppm(path).data, img.data)

    def test_write_rounds_half_up_and_clamps(self):
        img = ImageBuffer(np.array([0.5, -0.2, 1.7]).reshape(3, 1, 1))
        assert encode_ppm(img)[-3:] == bytes([128, 0, 255])

    def test_gray_written_as_rgb(self):
        raw = encode_ppm(ImageBuffer(np.full((1, 1, 1), 1.0)))
        assert raw.endswith(bytes([255, 255, 255]))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            read_ppm(str(tmp_path / 'nope.ppm'))


class TestImageBuffer:

    def test_channel_count(self):
        with pytest.raises(DimensionError):
            ImageBuffer(np.zeros((2, 4, 4)))

    def test_crop(self):
        img = ImageBuffer(np.arange(16.0).reshape(1, 4, 4) / 16)
        np.testing.assert_array_equal(img.crop(1, 2, 2, 2).data[0], [[6 / 16, 7 / 16], [10 / 16, 11 / 16]])
        with pytest.raises(DataError):
            img.crop(3, 3, 2, 2)

    def test_to_rgb(self):
        img = ImageBuffer(np.full((1, 2, 2), 0.25))
        assert img.to_rgb().shape == (3, 2, 2)
