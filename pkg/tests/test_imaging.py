"""
test_imaging.py - Testes dos algoritmos de imagem
"""

import math
import os
import sys

import numpy as np
import pytest
from scipy import ndimage

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.container import (
    CONTAINER_MAGIC, StudyContainer, _frame, blob_pixels, decode_blob, encode_blob, read_container,
    write_container,
)
from core.corpus import generate_corpus, synthesize_image
from core.imaging import (
    AcquisitionParams, ImageVolume, benchmark_detections, breast_density, detect_microcalcs,
    otsu_threshold, qc_metrics, render, standardize,
)
from core.jobs import parse_params, run_algorithm
from core.protocol import Degenerate, Malformed
from tests.test_config import (
    HOSPITAL_ACQ, REFERENCE, flat_tissue, limpar_diretorio, make_container, make_image,
    novo_diretorio, planted_spots,
)


def volume(array) -> ImageVolume:
    return ImageVolume(np.clip(np.rint(array), 0, 65535).astype(np.uint16))


class TestImageVolume:
    def test_requires_uint16(self):
        with pytest.raises(Malformed):
            ImageVolume(np.zeros((32, 32), dtype=np.int32))

    def test_minimum_size(self):
        with pytest.raises(Malformed):
            ImageVolume(np.zeros((15, 32), dtype=np.uint16))

    def test_bytes_are_little_endian_rows(self):
        pixels = np.arange(16 * 20, dtype=np.uint16).reshape(16, 20)
        data = ImageVolume(pixels).to_bytes()
        assert data[:4] == b"\x00\x00\x01\x00"
        assert ImageVolume.from_bytes(data, 20, 16) == ImageVolume(pixels)

    def test_payload_size_mismatch(self):
        with pytest.raises(Malformed):
            ImageVolume.from_bytes(b"\x00" * 10, 16, 16)


class TestAcquisition:
    def test_invalid_params(self):
        with pytest.raises(Malformed):
            AcquisitionParams(0, 100, 1, 0)
        with pytest.raises(Malformed):
            AcquisitionParams(28, 100, -1, 0)
        with pytest.raises(Malformed):
            AcquisitionParams(28, 100, 1, float("nan"))


class TestStandardize:
    """Padronização afim para o ponto de referência"""

    def test_identity_at_reference(self):
        img = volume(flat_tissue(seed=3))
        assert standardize(img, REFERENCE, REFERENCE) == img

    def test_two_renderings_agree(self):
        """Mesmo tecido sob aquisições diferentes converge ao mesmo resultado (±1)"""
        tissue = flat_tissue(2000.0, seed=4)
        other = AcquisitionParams(32.0, 160.0, 1.8, 50.0)
        a = standardize(ImageVolume(render(tissue, HOSPITAL_ACQ)), HOSPITAL_ACQ)
        b = standardize(ImageVolume(render(tissue, other)), other)
        diff = np.abs(a.pixels.astype(np.int64) - b.pixels.astype(np.int64))
        assert diff.max() <= 1

    def test_recovers_tissue(self):
        tissue = np.rint(flat_tissue(1500.0, seed=5))
        out = standardize(ImageVolume(render(tissue, HOSPITAL_ACQ)), HOSPITAL_ACQ)
        assert np.abs(out.pixels.astype(np.float64) - tissue).max() <= 1

    def test_clips_to_range(self):
        img = volume(np.full((16, 16), 65535.0))
        out = standardize(img, AcquisitionParams(10.0, 10.0, 0.01, 0.0))
        assert out.pixels.max() == 65535
        out = standardize(volume(np.zeros((16, 16))), AcquisitionParams(28.0, 100.0, 1.0, 500.0))
        assert out.pixels.min() == 0

    @pytest.mark.parametrize("seed", range(5))
    def test_monotone(self, seed):
        rng = np.random.default_rng(seed)
        params = AcquisitionParams(float(rng.uniform(20, 40)), float(rng.uniform(20, 300)),
                                   float(rng.uniform(0.5, 2.0)), float(rng.uniform(0, 500)))
        pixels = np.sort(rng.integers(0, 65536, size=32 * 32)).astype(np.uint16).reshape(32, 32)
        out = standardize(ImageVolume(pixels), params, REFERENCE).pixels.ravel()
        assert np.all(np.diff(out.astype(np.int64)) >= 0)


class TestQcMetrics:
    def test_matches_brute_force(self):
        img = volume(flat_tissue(1200.0, side=24, seed=6, noise=50.0))
        values = [float(v) for v in img.pixels.flatten()]
        mean = sum(values) / len(values)
        std = math.sqrt(sum((v - mean) ** 2 for v in values) / len(values))
        report = qc_metrics(img, "/node-a/x.smi")
        assert report.mean_brightness == pytest.approx(mean, rel=1e-12)
        assert report.contrast == pytest.approx(std, rel=1e-9)
        assert report.lfn == "/node-a/x.smi"

    def test_constant_image_has_zero_contrast(self):
        report = qc_metrics(volume(np.full((16, 16), 700.0)))
        assert report.mean_brightness == 700.0
        assert report.contrast == 0.0

    def test_checkerboard(self):
        board = (np.indices((64, 64)).sum(axis=0) % 2 * 255).astype(np.uint16)
        report = qc_metrics(ImageVolume(board))
        assert report.mean_brightness == pytest.approx(127.5)
        assert report.contrast == pytest.approx(127.5)


class TestDensity:
    """Otsu e fração densa"""

    def test_otsu_bimodal(self):
        values = np.array([10] * 50 + [200] * 50)
        threshold = otsu_threshold(values)
        assert 10 < threshold <= 200

    def test_otsu_single_value(self):
        assert otsu_threshold(np.array([42, 42, 42])) == 42

    def test_otsu_tie_takes_lowest(self):
        """Dois níveis: todo T em (a, b] separa igual; fica o menor"""
        assert otsu_threshold(np.array([3, 3, 9, 9])) == 4

    def test_half_dense(self):
        tissue = flat_tissue(1000.0, side=64, seed=7)
        tissue[:, 32:] += 2000.0
        result = breast_density(volume(tissue))
        assert result.dense_fraction == pytest.approx(0.5)
        assert 1000 < result.threshold_used <= 3000

    def test_background_excluded(self):
        tissue = np.zeros((64, 64))
        tissue[:, :16] = 1000.0
        tissue[:, 16:32] = 3000.0
        result = breast_density(volume(tissue))
        assert result.dense_fraction == pytest.approx(0.5)

    def test_degenerate_image(self):
        with pytest.raises(Degenerate):
            breast_density(volume(np.zeros((64, 64))))
        tissue = np.zeros((64, 64))
        tissue[0, :10] = 500.0
        with pytest.raises(Degenerate):
            breast_density(volume(tissue))

    def test_planted_band_fraction(self):
        rng = np.random.default_rng(11)
        image, truth = synthesize_image(rng, "L", "CC")
        output = run_algorithm("breast_density", encode_blob(image))
        assert output["dense_fraction"] == pytest.approx(truth.dense_fraction, abs=0.01)

    @pytest.mark.parametrize("scale,shift", [(1, 0), (2, 0), (3, 17), (7, 1000)])
    def test_fraction_invariant_under_positive_affine_map(self, scale, shift):
        rng = np.random.default_rng(5)
        tissue = np.where(rng.random((64, 64)) < 0.3, 3000, 1000) + rng.integers(-50, 51, size=(64, 64))
        tissue[:8] = 0
        base = breast_density(ImageVolume(tissue.astype(np.uint16))).dense_fraction
        mapped = np.where(tissue > 0, tissue * scale + shift, 0).astype(np.uint16)
        assert breast_density(ImageVolume(mapped)).dense_fraction == base


class TestMicrocalcs:
    """Top-hat de mediana com portão de tamanho"""

    def test_planted_spots_are_found(self):
        corners = [(20, 20), (60, 90), (100, 40)]
        result = detect_microcalcs(volume(planted_spots(corners)))
        assert result.count == 3
        truth = [(x + 0.5, y + 0.5) for x, y in corners]
        bench = benchmark_detections(result.locations, truth)
        assert bench.recall == 1.0
        assert bench.false_detections == 0
        assert bench.rms_error_px < 1.0

    def test_detections_sorted_by_row(self):
        result = detect_microcalcs(volume(planted_spots([(90, 30), (20, 30), (50, 10)])))
        ys = [y for _, y in result.locations]
        assert result.count == 3
        assert ys == sorted(ys)
        assert ys[0] == pytest.approx(10.5, abs=0.5)

    def test_flat_noise_has_no_detections(self):
        assert detect_microcalcs(volume(flat_tissue(1000.0, side=128, seed=8))).count == 0

    def test_smooth_disc_has_no_detections(self):
        yy, xx = np.mgrid[0:128, 0:128]
        disc = ((xx - 64) ** 2 + (yy - 64) ** 2 <= 40 ** 2).astype(np.float64) * 200.0
        rng = np.random.default_rng(9)
        tissue = 1000.0 + ndimage.gaussian_filter(disc, sigma=10.0) + rng.normal(0.0, 10.0, (128, 128))
        assert detect_microcalcs(volume(tissue)).count == 0

    def test_long_line_exceeds_size_gate(self):
        tissue = np.full((128, 128), 1000.0)
        tissue[64, 4:124] += 300.0
        assert detect_microcalcs(volume(tissue)).count == 0

    def test_short_line_is_one_detection(self):
        tissue = np.full((128, 128), 1000.0)
        tissue[64, 50:70] += 300.0
        result = detect_microcalcs(volume(tissue))
        assert result.count == 1
        x, y = result.locations[0]
        assert x == pytest.approx(59.5)
        assert y == pytest.approx(64.0)

    def test_parameter_validation(self):
        img = volume(flat_tissue(side=32))
        with pytest.raises(Malformed):
            detect_microcalcs(img, window=4)
        with pytest.raises(Malformed):
            detect_microcalcs(img, min_snr=0)

    def test_benchmark_counts(self):
        bench = benchmark_detections([(10.0, 10.0), (50.0, 50.0)], [(11.0, 10.0), (80.0, 80.0)])
        assert bench.matched == 1
        assert bench.recall == 0.5
        assert bench.false_detections == 1
        assert bench.rms_error_px == pytest.approx(1.0)
        assert benchmark_detections([], []).recall == 1.0

    @pytest.mark.slow
    def test_corpus_benchmark(self):
        """100 imagens sintéticas: recall >= 0.95, no máximo uma falsa detecção por imagem"""
        out_dir = novo_diretorio("bench")
        try:
            studies = generate_corpus(50, 2024, out_dir)
            planted, matched, images = 0, 0, 0
            errors = []
            for study in studies:
                with open(os.path.join(out_dir, study.file), "rb") as f:
                    container = read_container(f.read())
                for image, truth in zip(container.images, study.images):
                    output = run_algorithm("detect_microcalcs", encode_blob(image))
                    bench = benchmark_detections([tuple(p) for p in output["locations"]], truth.calcifications)
                    planted += bench.planted
                    matched += bench.matched
                    images += 1
                    assert bench.false_detections <= 1, f"{study.file} {truth.view}"
                    errors.extend([bench.rms_error_px] * bench.matched)
            assert planted > 0
            assert images == 100
            assert matched / planted >= 0.95
            assert math.sqrt(sum(e * e for e in errors) / len(errors)) <= 1.5
        finally:
            limpar_diretorio(out_dir)


class TestContainer:
    """Formatos MGC1 e SMI1"""

    def test_container_roundtrip(self):
        data = make_container("ST-0042", seed=2)
        container = read_container(data)
        assert container.study_id == "ST-0042"
        assert [i.view for i in container.images] == ["CC", "MLO"]
        assert container.header["patient_name"] == "TESTE^MARIA"
        assert write_container(container) == data

    def test_blob_has_no_identifiers(self):
        container = read_container(make_container(seed=3))
        blob = encode_blob(container.images[0])
        assert b"TESTE" not in blob
        assert b"MRN-" not in blob
        vol, acquisition, header = decode_blob(blob)
        assert vol == container.images[0].volume
        assert acquisition == HOSPITAL_ACQ
        assert blob_pixels(blob) == vol.to_bytes()
        assert header["bits"] == 16

    def test_rejects_trailing_bytes(self):
        with pytest.raises(Malformed):
            read_container(make_container(seed=4) + b"\x00\x00")

    def test_rejects_truncated_payload(self):
        with pytest.raises(Malformed):
            read_container(make_container(seed=4)[:-10])

    def test_rejects_bad_magic(self):
        with pytest.raises(Malformed):
            read_container(b"XXXX" + make_container(seed=4)[4:])

    def test_rejects_unknown_header_field(self):
        image = make_image()
        container = StudyContainer({"study_id": "ST-1", "consent": "Y", "patient_id": "X"}, [image])
        data = bytearray(write_container(container))
        # troca 'consent' por um campo desconhecido de mesmo tamanho
        index = data.index(b'"consent"')
        data[index:index + 9] = b'"cunsent"'
        with pytest.raises(Malformed):
            read_container(bytes(data))

    def test_rejects_non_16_bit(self):
        image = make_image()
        entry = dict(image.technical_header(), bits=8)
        header = {"study_id": "ST-1", "consent": "Y", "images": [entry]}
        data = _frame(CONTAINER_MAGIC, header, [image.volume.to_bytes()])
        with pytest.raises(Malformed):
            read_container(data)

    def test_annotations_survive(self):
        annotation = {"annotator_role": "radiologist", "finding": "mass", "region_shape": "circle",
                      "region_coords": "10,10,4"}
        container = read_container(make_container(seed=5, annotations=(annotation,)))
        assert container.images[0].annotations == (annotation,)


class TestJobsAlgorithms:
    def test_standardize_output_checksum_is_stable(self):
        blob = encode_blob(make_image(seed=12))
        first = run_algorithm("standardize", blob)
        assert first == run_algorithm("standardize", blob)
        assert first["width"] == 64

    def test_density_without_standardize(self):
        blob = encode_blob(make_image(seed=13))
        assert "dense_fraction" in run_algorithm("breast_density", blob, {"standardize": "false"})

    @pytest.mark.parametrize("window, expected", [(15, 15), ("9", 9), (21.0, 21), ("11.0", 11)])
    def test_integral_window_accepted(self, window, expected):
        assert parse_params("detect_microcalcs", {"window": window})["window"] == expected

    @pytest.mark.parametrize("window", [15.7, "15.7", True, "quinze", float("inf"), None])
    def test_fractional_window_rejected(self, window):
        with pytest.raises(Malformed):
            parse_params("detect_microcalcs", {"window": window})
