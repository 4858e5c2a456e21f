"""
container.py - Formatos binários de estudo (MGC1) e de imagem armazenada (SMI1)

MGC1: magic, tamanho do cabeçalho (uint32 big-endian), cabeçalho JSON
canônico e os payloads de pixels little-endian de 16 bits, na ordem do
cabeçalho. SMI1 segue o mesmo desenho com um cabeçalho só técnico.
"""

import json
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, List, Tuple

from .imaging import AcquisitionParams, ImageVolume
from .protocol import Malformed, canonical_json


CONTAINER_MAGIC = b"MGC1"
BLOB_MAGIC = b"SMI1"
_LENGTH = struct.Struct(">I")

VIEWS = ("CC", "MLO")
LATERALITIES = ("L", "R")
STUDY_FIELDS = ("patient_name", "patient_id", "birth_date", "study_date", "study_id", "consent")
ANNOTATION_FIELDS = ("annotator_role", "finding", "region_shape", "region_coords")


@dataclass(frozen=True)
class ContainerImage:
    view: str
    laterality: str
    volume: ImageVolume
    acquisition: AcquisitionParams
    annotations: Tuple[Dict[str, Any], ...] = ()

    @property
    def width(self) -> int:
        return self.volume.width

    @property
    def height(self) -> int:
        return self.volume.height

    def technical_header(self) -> Dict[str, Any]:
        header = {
            "view": self.view,
            "laterality": self.laterality,
            "width": self.width,
            "height": self.height,
            "bits": 16,
            "spacing_mm": self.volume.spacing_mm,
        }
        header.update(self.acquisition.to_dict())
        return header


@dataclass(frozen=True)
class StudyContainer:
    """Estudo como chega do equipamento: cabeçalho identificado + imagens"""

    header: Dict[str, Any]
    images: List[ContainerImage] = field(default_factory=list)

    @property
    def study_id(self) -> str:
        return str(self.header.get("study_id", ""))


def _frame(magic: bytes, header: Dict[str, Any], payloads: List[bytes]) -> bytes:
    head = canonical_json(header).encode("utf-8")
    return magic + _LENGTH.pack(len(head)) + head + b"".join(payloads)


def _unframe(magic: bytes, data: bytes, what: str) -> Tuple[Dict[str, Any], memoryview]:
    if len(data) < 8 or data[:4] != magic:
        raise Malformed(f"{what} sem assinatura {magic.decode()}")
    (size,) = _LENGTH.unpack_from(data, 4)
    if 8 + size > len(data):
        raise Malformed(f"{what} truncado no cabeçalho")
    try:
        header = json.loads(bytes(data[8:8 + size]).decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as e:
        raise Malformed(f"cabeçalho de {what} inválido: {e}")
    if not isinstance(header, dict):
        raise Malformed(f"cabeçalho de {what} deve ser um objeto")
    return header, memoryview(data)[8 + size:]


def _image_from_header(entry: Dict[str, Any], payload: bytes) -> Tuple[ImageVolume, AcquisitionParams]:
    if entry.get("bits") != 16:
        raise Malformed(f"apenas imagens de 16 bits são aceitas, não {entry.get('bits')}")
    if entry.get("view") not in VIEWS or entry.get("laterality") not in LATERALITIES:
        raise Malformed(f"incidência inválida: {entry.get('laterality')}-{entry.get('view')}")
    try:
        width, height = int(entry["width"]), int(entry["height"])
        spacing = float(entry.get("spacing_mm", 0.1))
    except (KeyError, TypeError, ValueError) as e:
        raise Malformed(f"dimensões inválidas: {e}")
    volume = ImageVolume.from_bytes(payload, width, height, spacing)
    return volume, AcquisitionParams.from_dict(entry)


def write_container(container: StudyContainer) -> bytes:
    header = {k: container.header.get(k) for k in STUDY_FIELDS if k in container.header}
    entries = []
    for image in container.images:
        entry = image.technical_header()
        if image.annotations:
            entry["annotations"] = [dict(a) for a in image.annotations]
        entries.append(entry)
    header["images"] = entries
    return _frame(CONTAINER_MAGIC, header, [image.volume.to_bytes() for image in container.images])


def read_container(data: bytes) -> StudyContainer:
    """
    Interpreta um contêiner MGC1.

    Raises:
        Malformed: assinatura, cabeçalho ou payloads inconsistentes
    """
    header, rest = _unframe(CONTAINER_MAGIC, data, "contêiner")
    entries = header.pop("images", None)
    if not isinstance(entries, list) or not entries:
        raise Malformed("contêiner sem imagens")
    images = []
    offset = 0
    for entry in entries:
        if not isinstance(entry, dict):
            raise Malformed("entrada de imagem inválida")
        try:
            size = int(entry["width"]) * int(entry["height"]) * 2
        except (KeyError, TypeError, ValueError) as e:
            raise Malformed(f"dimensões inválidas: {e}")
        if size <= 0 or offset + size > len(rest):
            raise Malformed("payload de pixels truncado")
        volume, acquisition = _image_from_header(entry, bytes(rest[offset:offset + size]))
        offset += size
        annotations = entry.get("annotations") or []
        if not isinstance(annotations, list) or not all(isinstance(a, dict) for a in annotations):
            raise Malformed("anotações inválidas")
        images.append(ContainerImage(
            entry["view"], entry["laterality"], volume, acquisition,
            tuple({k: a[k] for k in ANNOTATION_FIELDS if k in a} for a in annotations),
        ))
    if offset != len(rest):
        raise Malformed(f"{len(rest) - offset} bytes excedentes após os payloads")
    unknown = sorted(set(header) - set(STUDY_FIELDS))
    if unknown:
        raise Malformed(f"campos desconhecidos no cabeçalho: {', '.join(unknown)}")
    return StudyContainer(header, images)


def encode_blob(image: ContainerImage) -> bytes:
    """Imagem armazenada (.smi): cabeçalho técnico + payload exato, sem identificadores"""
    return _frame(BLOB_MAGIC, image.technical_header(), [image.volume.to_bytes()])


def decode_blob(data: bytes) -> Tuple[ImageVolume, AcquisitionParams, Dict[str, Any]]:
    header, rest = _unframe(BLOB_MAGIC, data, "blob")
    volume, acquisition = _image_from_header(header, bytes(rest))
    return volume, acquisition, header


def blob_pixels(data: bytes) -> bytes:
    """Payload de pixels contido num blob SMI1"""
    _, rest = _unframe(BLOB_MAGIC, data, "blob")
    return bytes(rest)
