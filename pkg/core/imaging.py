"""
imaging.py - Algoritmos de análise de mamografias (imagens de 16 bits)

Padronização afim (substituto documentado da forma padrão de mamograma),
métricas de controle de qualidade, densidade mamária por Otsu e detecção
de microcalcificações por top-hat de mediana.
"""

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from config import CONFIG
from .protocol import Degenerate, Malformed


MIN_SIDE = 16
MAX_VALUE = 65535
MAD_TO_SIGMA = 1.4826
MIN_BREAST_FRACTION = 0.01

# vizinhança 8-conectada
_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class AcquisitionParams:
    tube_kvp: float
    exposure_mas: float
    detector_gain: float
    detector_offset: float

    def __post_init__(self):
        if not (self.tube_kvp > 0 and self.exposure_mas > 0):
            raise Malformed(f"kVp e mAs devem ser positivos: {self.tube_kvp}, {self.exposure_mas}")
        if not self.detector_gain > 0:
            raise Malformed(f"ganho do detector deve ser positivo: {self.detector_gain}")
        if not all(math.isfinite(v) for v in asdict(self).values()):
            raise Malformed("parâmetros de aquisição não finitos")

    @property
    def exposure(self) -> float:
        return self.tube_kvp * self.exposure_mas

    @classmethod
    def reference(cls) -> "AcquisitionParams":
        return cls(CONFIG.reference_kvp, CONFIG.reference_mas, CONFIG.reference_gain, CONFIG.reference_offset)

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AcquisitionParams":
        try:
            return cls(
                float(data["tube_kvp"]), float(data["exposure_mas"]),
                float(data["detector_gain"]), float(data["detector_offset"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise Malformed(f"parâmetros de aquisição inválidos: {e}")


@dataclass(frozen=True, eq=False)
class ImageVolume:
    """Grade de pixels uint16 (linhas x colunas) com espaçamento em mm"""

    pixels: np.ndarray
    spacing_mm: float = 0.1

    def __post_init__(self):
        if not isinstance(self.pixels, np.ndarray) or self.pixels.ndim != 2:
            raise Malformed("pixels devem formar uma grade 2D")
        if self.pixels.dtype != np.uint16:
            raise Malformed(f"pixels devem ser uint16, não {self.pixels.dtype}")
        if self.width < MIN_SIDE or self.height < MIN_SIDE:
            raise Malformed(f"imagem {self.width}x{self.height} menor que {MIN_SIDE}x{MIN_SIDE}")

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @classmethod
    def from_bytes(cls, data: bytes, width: int, height: int, spacing_mm: float = 0.1) -> "ImageVolume":
        """Payload little-endian de 16 bits em ordem de linhas"""
        expected = width * height * 2
        if width <= 0 or height <= 0 or len(data) != expected:
            raise Malformed(f"payload de {len(data)} bytes não corresponde a {width}x{height}x16 bits")
        pixels = np.frombuffer(data, dtype="<u2").reshape(height, width).astype(np.uint16)
        return cls(pixels, spacing_mm)

    def to_bytes(self) -> bytes:
        return self.pixels.astype("<u2").tobytes()

    def __eq__(self, other) -> bool:
        if not isinstance(other, ImageVolume):
            return NotImplemented
        return self.spacing_mm == other.spacing_mm and np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True)
class QCReport:
    mean_brightness: float
    contrast: float
    lfn: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class DensityResult:
    dense_fraction: float
    threshold_used: int

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class MicrocalcResult:
    count: int
    locations: List[Tuple[float, float]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {"count": self.count, "locations": [[x, y] for x, y in self.locations]}


@dataclass(frozen=True)
class BenchmarkResult:
    recall: float
    false_detections: int
    rms_error_px: float
    matched: int
    planted: int

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def standardize(img: ImageVolume, params: AcquisitionParams,
                ref: Optional[AcquisitionParams] = None) -> ImageVolume:
    """
    Leva a imagem ao ponto de operação de referência:
    v' = ((v - b) / g) * (g_ref * E_ref / E) + b_ref, com E = kVp * mAs,
    arredondado ao inteiro mais próximo e limitado a 0..65535.
    """
    ref = ref or AcquisitionParams.reference()
    scale = ref.detector_gain * ref.exposure / params.exposure
    values = (img.pixels.astype(np.float64) - params.detector_offset) / params.detector_gain
    out = np.rint(values * scale + ref.detector_offset)
    return ImageVolume(np.clip(out, 0, MAX_VALUE).astype(np.uint16), img.spacing_mm)


def render(tissue: np.ndarray, params: AcquisitionParams,
           ref: Optional[AcquisitionParams] = None) -> np.ndarray:
    """Inverso de standardize: simula a aquisição v = g * t * (E / E_ref) + b"""
    ref = ref or AcquisitionParams.reference()
    scale = params.detector_gain * params.exposure / (ref.detector_gain * ref.exposure)
    values = (np.asarray(tissue, dtype=np.float64) - ref.detector_offset) * scale + params.detector_offset
    return np.clip(np.rint(values), 0, MAX_VALUE).astype(np.uint16)


def qc_metrics(img: ImageVolume, lfn: str = "") -> QCReport:
    """Brilho médio e contraste (desvio padrão populacional) em dupla precisão"""
    data = img.pixels.astype(np.float64)
    mean = float(data.mean())
    contrast = float(np.sqrt(np.mean((data - mean) ** 2)))
    return QCReport(mean_brightness=mean, contrast=contrast, lfn=lfn)


def otsu_threshold(values: np.ndarray) -> int:
    """
    Limiar de Otsu sobre valores inteiros. Os candidatos são todos os
    inteiros em (min, max]; a classe superior é {v >= T} e o empate fica
    com o menor T. Sem candidatos (um único valor) o limiar é o próprio valor.
    """
    levels, counts = np.unique(np.asarray(values, dtype=np.int64), return_counts=True)
    if levels.size == 1:
        return int(levels[0])
    counts = counts.astype(np.float64)
    weighted = counts * levels.astype(np.float64)
    total, total_sum = counts.sum(), weighted.sum()
    # T entre levels[k-1] e levels[k] separa levels[:k] do resto
    w0 = np.cumsum(counts)[:-1]
    s0 = np.cumsum(weighted)[:-1]
    w1 = total - w0
    mu0 = s0 / w0
    mu1 = (total_sum - s0) / w1
    between = w0 * w1 * (mu0 - mu1) ** 2
    k = int(np.argmax(between))
    return int(levels[k]) + 1


def breast_density(img: ImageVolume) -> DensityResult:
    """
    Fração densa: pixels não nulos >= limiar de Otsu, sobre os pixels não
    nulos. Fundo (zero) fica fora do histograma.

    Raises:
        Degenerate: menos de 1% dos pixels não nulos
    """
    breast = img.pixels[img.pixels > 0]
    if breast.size == 0 or breast.size < MIN_BREAST_FRACTION * img.pixels.size:
        raise Degenerate(f"apenas {breast.size} de {img.pixels.size} pixels com tecido")
    threshold = otsu_threshold(breast)
    dense = int(np.count_nonzero(breast >= threshold))
    return DensityResult(dense_fraction=dense / breast.size, threshold_used=threshold)


def detect_microcalcs(img: ImageVolume, min_snr: float = CONFIG.microcalc_min_snr,
                      window: int = CONFIG.microcalc_window) -> MicrocalcResult:
    """
    Top-hat de mediana: r = img - mediana(img, window). Candidatos onde
    r > min_snr * 1.4826 * MAD(r), agrupados por 8-conectividade; cada
    componente com área entre 1 e window²/2 gera uma detecção no centróide
    ponderado pelo resíduo. Detecções ordenadas por (y, x).
    """
    if not isinstance(window, int) or window < 3 or window % 2 == 0:
        raise Malformed(f"janela deve ser ímpar e >= 3: {window}")
    if not min_snr > 0:
        raise Malformed(f"min_snr deve ser positivo: {min_snr}")

    data = img.pixels.astype(np.float64)
    residual = data - ndimage.median_filter(data, size=window, mode="reflect")
    mad = float(np.median(np.abs(residual - np.median(residual))))
    sigma = MAD_TO_SIGMA * mad
    candidates = residual > min_snr * sigma

    labels, n = ndimage.label(candidates, structure=_EIGHT_CONNECTED)
    if n == 0:
        return MicrocalcResult(0, [])
    index = np.arange(1, n + 1)
    areas = ndimage.sum_labels(candidates, labels, index)
    weights = np.where(candidates, residual, 0.0)
    centroids = ndimage.center_of_mass(weights, labels, index)

    max_area = window * window / 2
    locations = [
        (float(cx), float(cy))
        for (cy, cx), area in zip(centroids, areas)
        if 1 <= area <= max_area
    ]
    locations.sort(key=lambda p: (p[1], p[0]))
    return MicrocalcResult(count=len(locations), locations=locations)


def benchmark_detections(detections: Sequence[Tuple[float, float]],
                         truth: Sequence[Tuple[float, float]],
                         tolerance_px: float = 3.0) -> BenchmarkResult:
    """
    Compara detecções com a verdade plantada. Pareamento guloso pelo par
    mais próximo dentro da tolerância; sobras contam como falsas detecções.
    """
    pairs = []
    for i, (tx, ty) in enumerate(truth):
        for j, (dx, dy) in enumerate(detections):
            dist = math.hypot(tx - dx, ty - dy)
            if dist <= tolerance_px:
                pairs.append((dist, i, j))
    pairs.sort()
    used_truth, used_det, errors = set(), set(), []
    for dist, i, j in pairs:
        if i in used_truth or j in used_det:
            continue
        used_truth.add(i)
        used_det.add(j)
        errors.append(dist)
    recall = len(used_truth) / len(truth) if truth else 1.0
    rms = math.sqrt(sum(e * e for e in errors) / len(errors)) if errors else 0.0
    return BenchmarkResult(
        recall=recall,
        false_detections=len(detections) - len(used_det),
        rms_error_px=rms,
        matched=len(errors),
        planted=len(truth),
    )
