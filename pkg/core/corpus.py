"""
corpus.py - Corpus sintético de mamografias com verdade plantada

Cada estudo tem uma mama (CC e MLO). O tecido é gordura (1000) com uma
faixa densa (3000) encostada numa borda lateral, ruído gaussiano e
microcalcificações 2x2 de amplitude 200 na região gordurosa. A imagem é
renderizada com parâmetros de aquisição sorteados, de modo que a
padronização a traz de volta ao espaço do tecido.

Função pura de (n, seed): a mesma chamada gera arquivos idênticos.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Tuple

import numpy as np

from .container import ContainerImage, StudyContainer, write_container
from .imaging import AcquisitionParams, ImageVolume, render


logger = logging.getLogger(__name__)

SIDE = 128
FATTY_LEVEL = 1000.0
DENSE_LEVEL = 3000.0
NOISE_SIGMA = 10.0
CALC_AMPLITUDE = 200.0
CALC_SIZE = 2
MAX_CALCS = 3
BAND_MIN, BAND_MAX = 16, 80
EDGE_MARGIN = 15
BORDER_MARGIN = 8
CALC_SPACING = 20
KVP_CHOICES = (28.0, 30.0, 32.0)

_SURNAMES = ("SILVA", "SANTOS", "OLIVEIRA", "SOUZA", "PEREIRA", "COSTA", "RODRIGUES", "ALMEIDA", "NUNES", "LIMA")
_GIVEN = ("MARIA", "ANA", "JULIANA", "FERNANDA", "PATRICIA", "ALINE", "CAMILA", "BEATRIZ", "HELENA", "LUCIA")
_LETTERS = "ABCDEFGHJKLMNPQRSTUVWXYZ"


@dataclass(frozen=True)
class PlantedImage:
    laterality: str
    view: str
    dense_fraction: float
    dense_side: str
    calcifications: List[Tuple[float, float]]
    acquisition: Dict[str, float]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "laterality": self.laterality,
            "view": self.view,
            "dense_fraction": self.dense_fraction,
            "dense_side": self.dense_side,
            "calcifications": [[x, y] for x, y in self.calcifications],
            "acquisition": dict(self.acquisition),
        }


@dataclass(frozen=True)
class PlantedStudy:
    file: str
    study_id: str
    images: List[PlantedImage] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {"file": self.file, "study_id": self.study_id, "images": [i.to_dict() for i in self.images]}


def _place_calcifications(rng: np.random.Generator, x_low: int, x_high: int, count: int) -> List[Tuple[int, int]]:
    """Cantos superiores esquerdos dos pontos, afastados entre si"""
    placed: List[Tuple[int, int]] = []
    y_low, y_high = BORDER_MARGIN, SIDE - BORDER_MARGIN - CALC_SIZE
    for _ in range(200):
        if len(placed) == count or x_high < x_low:
            break
        x = int(rng.integers(x_low, x_high + 1))
        y = int(rng.integers(y_low, y_high + 1))
        if all((x - px) ** 2 + (y - py) ** 2 >= CALC_SPACING ** 2 for px, py in placed):
            placed.append((x, y))
    return placed


def synthesize_image(rng: np.random.Generator, laterality: str, view: str) -> Tuple[ContainerImage, PlantedImage]:
    band = int(rng.integers(BAND_MIN, BAND_MAX + 1))
    dense_side = "left" if rng.random() < 0.5 else "right"
    tissue = np.full((SIDE, SIDE), FATTY_LEVEL)
    if dense_side == "left":
        tissue[:, :band] = DENSE_LEVEL
        x_low, x_high = band + EDGE_MARGIN, SIDE - BORDER_MARGIN - CALC_SIZE
    else:
        tissue[:, SIDE - band:] = DENSE_LEVEL
        x_low, x_high = BORDER_MARGIN, SIDE - band - EDGE_MARGIN - CALC_SIZE
    tissue += rng.normal(0.0, NOISE_SIGMA, size=tissue.shape)

    corners = _place_calcifications(rng, x_low, x_high, int(rng.integers(0, MAX_CALCS + 1)))
    for x, y in corners:
        tissue[y:y + CALC_SIZE, x:x + CALC_SIZE] += CALC_AMPLITUDE

    acquisition = AcquisitionParams(
        tube_kvp=float(rng.choice(KVP_CHOICES)),
        exposure_mas=round(float(rng.uniform(100.0, 180.0)), 1),
        detector_gain=round(float(rng.uniform(1.0, 2.0)), 3),
        detector_offset=round(float(rng.uniform(0.0, 200.0)), 1),
    )
    volume = ImageVolume(render(tissue, acquisition))
    centres = sorted(((x + CALC_SIZE / 2 - 0.5, y + CALC_SIZE / 2 - 0.5) for x, y in corners),
                     key=lambda p: (p[1], p[0]))
    if centres:
        coords = ";".join(f"{cx:g},{cy:g}" for cx, cy in centres)
        annotations = ({"annotator_role": "radiologist", "finding": "microcalc-cluster",
                        "region_shape": "point", "region_coords": coords},)
    else:
        annotations = ({"annotator_role": "radiologist", "finding": "normal"},)
    image = ContainerImage(view, laterality, volume, acquisition, annotations)
    planted = PlantedImage(laterality, view, band / SIDE, dense_side, centres, acquisition.to_dict())
    return image, planted


def _patient(rng: np.random.Generator) -> Dict[str, str]:
    code = "".join(_LETTERS[int(i)] for i in rng.integers(0, len(_LETTERS), size=3))
    year = int(rng.integers(1940, 1986))
    month = int(rng.integers(1, 13))
    day = int(rng.integers(1, 29))
    return {
        "patient_id": f"MRN-{code}-{int(rng.integers(10000, 100000))}",
        "patient_name": f"{_SURNAMES[int(rng.integers(len(_SURNAMES)))]}^{_GIVEN[int(rng.integers(len(_GIVEN)))]}",
        "birth_date": f"{year:04d}-{month:02d}-{day:02d}",
    }


def synthesize_study(rng: np.random.Generator, index: int,
                     patients: List[Dict[str, str]]) -> Tuple[StudyContainer, List[PlantedImage]]:
    # a cada cinco estudos, um retorno de paciente já visto
    if patients and index % 5 == 4:
        patient = patients[int(rng.integers(len(patients)))]
    else:
        patient = _patient(rng)
        patients.append(patient)
    month, day = int(rng.integers(1, 13)), int(rng.integers(1, 29))
    header = dict(patient)
    header.update({
        "study_id": f"ST-{index + 1:04d}",
        "study_date": f"2023-{month:02d}-{day:02d}",
        "consent": "Y",
    })
    laterality = "L" if rng.random() < 0.5 else "R"
    images, planted = [], []
    for view in ("CC", "MLO"):
        image, truth = synthesize_image(rng, laterality, view)
        images.append(image)
        planted.append(truth)
    return StudyContainer(header, images), planted


def generate_corpus(n: int, seed: int, out_dir: str) -> List[PlantedStudy]:
    """
    Grava n contêineres study_NNNN.mgc e manifest.json com a verdade
    plantada (fração densa, centros das calcificações, aquisição).
    """
    if n < 0:
        raise ValueError(f"n deve ser não negativo: {n}")
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    patients: List[Dict[str, str]] = []
    studies: List[PlantedStudy] = []
    for index in range(n):
        container, planted = synthesize_study(rng, index, patients)
        filename = f"study_{index + 1:04d}.mgc"
        with open(os.path.join(out_dir, filename), "wb") as f:
            f.write(write_container(container))
        studies.append(PlantedStudy(filename, container.study_id, planted))
    manifest = {"seed": seed, "count": n, "side": SIDE, "studies": [s.to_dict() for s in studies]}
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"Corpus sintético: {n} estudos em {out_dir} (seed {seed})")
    return studies


def load_manifest(out_dir: str) -> Dict[str, Any]:
    with open(os.path.join(out_dir, "manifest.json"), "r", encoding="utf-8") as f:
        return json.load(f)
