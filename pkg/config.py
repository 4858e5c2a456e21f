"""
config.py - MamoRede v1.0
Configurações da rede federada de mamografias
"""

import json
import os
from dataclasses import MISSING, dataclass, fields
from typing import Any, Dict, Optional, Tuple


@dataclass(frozen=True)
class AppConfig:
    app_title: str = "MamoRede - Rede Federada de Mamografias"

    # Protocolo
    max_frame_bytes: int = 64 * 1024 * 1024
    socket_timeout: float = 30.0

    # Imagem: parâmetros padrão dos algoritmos
    microcalc_window: int = 15
    microcalc_min_snr: float = 5.0

    # Ponto de referência da padronização (kVp, mAs, ganho, offset)
    reference_kvp: float = 28.0
    reference_mas: float = 100.0
    reference_gain: float = 1.0
    reference_offset: float = 0.0

    # Mediador
    placement_threshold_bytes: int = 10 * 1024 * 1024
    job_workers: int = 4

    # Catálogo
    list_page_limit: int = 100
    catalogue_fsync: bool = True

    # Esquemas de base (documentos JSON)
    schema_dir: str = os.path.join(os.path.dirname(os.path.abspath(__file__)), "schemas")


CONFIG = AppConfig()


def parse_address(address: str) -> Tuple[str, int]:
    """Converte 'host:porta' em tupla (host, porta)."""
    host, sep, port = (address or "").rpartition(":")
    if not sep or not host or not port.isdigit():
        raise ValueError(f"Endereço inválido: {address!r} (esperado host:porta)")
    return host, int(port)


def _load_document(cls, path: str, overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ValueError(f"Configuração inválida em {path}: esperado objeto JSON")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"Chaves desconhecidas em {path}: {', '.join(unknown)}")
    data.update(overrides or {})
    missing = sorted(
        f.name for f in fields(cls)
        if f.default is MISSING and f.default_factory is MISSING and f.name not in data
    )
    if missing:
        raise ValueError(f"Chaves obrigatórias ausentes em {path}: {', '.join(missing)}")
    return data


@dataclass(frozen=True)
class NodeConfig:
    """Configuração de um grid-box (nó hospitalar)"""

    node_id: str
    listen_address: str
    data_dir: str
    catalogue_address: str
    roster_path: str
    token_path: str
    site_key_path: str
    placement_threshold_bytes: int = CONFIG.placement_threshold_bytes
    job_workers: int = CONFIG.job_workers
    backup_interval_hours: float = 0

    @classmethod
    def from_file(cls, path: str) -> "NodeConfig":
        return cls(**_load_document(cls, path))

    def check_data_dir(self) -> None:
        os.makedirs(self.data_dir, exist_ok=True)
        if not os.access(self.data_dir, os.W_OK):
            raise ValueError(f"Diretório de dados sem permissão de escrita: {self.data_dir}")


@dataclass(frozen=True)
class CatalogueConfig:
    """Configuração do serviço de catálogo virtual de arquivos"""

    listen_address: str
    data_dir: str
    roster_path: str
    fsync: bool = CONFIG.catalogue_fsync

    @classmethod
    def from_file(cls, path: str) -> "CatalogueConfig":
        return cls(**_load_document(cls, path))

    @property
    def log_path(self) -> str:
        return os.path.join(self.data_dir, "catalogue.jsonl")


@dataclass(frozen=True)
class CliConfig:
    node_address: str
    token_path: str
    output_format: str = "table"

    def __post_init__(self):
        if self.output_format not in ("table", "st"):
            raise ValueError(f"Formato de saída inválido: {self.output_format}")
        parse_address(self.node_address)
