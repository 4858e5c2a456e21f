"""
jobs.py - Conjunto fechado de algoritmos executáveis na federação

Cada algoritmo recebe os bytes de um blob SMI1 e devolve um dicionário
com nomes de campos fixos.
"""

import uuid
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Tuple

import pandas as pd

from config import CONFIG
from .container import decode_blob
from .imaging import breast_density, detect_microcalcs, qc_metrics, standardize
from .protocol import GridError, Malformed, UnknownAlgorithm
from .security import Security


JOB_STATUSES = ("RUNNING", "COMPLETE", "PARTIAL", "FAILED")


def _as_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "sim", "on"):
        return True
    if text in ("0", "false", "no", "nao", "não", "off"):
        return False
    raise Malformed(f"valor booleano inválido: {value!r}")


def _as_int(value: Any) -> int:
    if isinstance(value, bool):
        raise Malformed(f"valor inteiro inválido: {value!r}")
    if isinstance(value, int):
        return value
    number = float(value)
    if not number.is_integer():
        raise Malformed(f"valor inteiro inválido: {value!r}")
    return int(number)


# parâmetro -> (conversor, padrão)
PARAMETERS: Dict[str, Dict[str, Tuple[Callable[[Any], Any], Any]]] = {
    "qc_metrics": {},
    "standardize": {},
    "breast_density": {"standardize": (_as_bool, True)},
    "detect_microcalcs": {
        "standardize": (_as_bool, True),
        "min_snr": (float, CONFIG.microcalc_min_snr),
        "window": (_as_int, CONFIG.microcalc_window),
    },
}


def check_algorithm(name: str) -> None:
    if name not in PARAMETERS:
        raise UnknownAlgorithm(f"algoritmo não registrado: {name} (disponíveis: {', '.join(sorted(PARAMETERS))})")


def parse_params(algorithm: str, params: Optional[Dict[str, Any]]) -> Dict[str, Any]:
    """Aplica padrões e converte tipos; parâmetros desconhecidos são rejeitados"""
    check_algorithm(algorithm)
    known = PARAMETERS[algorithm]
    params = dict(params or {})
    unknown = sorted(set(params) - set(known))
    if unknown:
        raise Malformed(f"parâmetros desconhecidos para {algorithm}: {', '.join(unknown)}")
    parsed = {}
    for name, (convert, default) in known.items():
        try:
            parsed[name] = convert(params[name]) if name in params else default
        except (TypeError, ValueError) as e:
            raise Malformed(f"parâmetro {name} inválido: {e}")
    return parsed


def _qc(blob: bytes, params: Dict[str, Any]) -> Dict[str, Any]:
    volume, _, _ = decode_blob(blob)
    report = qc_metrics(volume)
    return {"mean_brightness": report.mean_brightness, "contrast": report.contrast}


def _standardize(blob: bytes, params: Dict[str, Any]) -> Dict[str, Any]:
    volume, acquisition, _ = decode_blob(blob)
    out = standardize(volume, acquisition)
    report = qc_metrics(out)
    return {
        "width": out.width,
        "height": out.height,
        "checksum": Security.sha256_hex(out.to_bytes()),
        "mean_brightness": report.mean_brightness,
        "contrast": report.contrast,
    }


def _density(blob: bytes, params: Dict[str, Any]) -> Dict[str, Any]:
    volume, acquisition, _ = decode_blob(blob)
    if params["standardize"]:
        volume = standardize(volume, acquisition)
    return breast_density(volume).to_dict()


def _microcalcs(blob: bytes, params: Dict[str, Any]) -> Dict[str, Any]:
    volume, acquisition, _ = decode_blob(blob)
    if params["standardize"]:
        volume = standardize(volume, acquisition)
    return detect_microcalcs(volume, min_snr=params["min_snr"], window=params["window"]).to_dict()


ALGORITHMS: Dict[str, Callable[[bytes, Dict[str, Any]], Dict[str, Any]]] = {
    "qc_metrics": _qc,
    "standardize": _standardize,
    "breast_density": _density,
    "detect_microcalcs": _microcalcs,
}


def run_algorithm(algorithm: str, blob: bytes, params: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Invocação direta, em processo, de um algoritmo sobre um blob"""
    parsed = parse_params(algorithm, params)
    return ALGORITHMS[algorithm](blob, parsed)


@dataclass(frozen=True)
class JobSpec:
    job_id: str
    algorithm: str
    inputs: Tuple[str, ...]
    requester: str
    parameters: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def create(cls, algorithm: str, inputs: Iterable[str], requester: str,
               parameters: Optional[Dict[str, Any]] = None) -> "JobSpec":
        check_algorithm(algorithm)
        # normaliza parâmetros cedo para que erros apareçam no solicitante
        parse_params(algorithm, parameters)
        return cls(f"{requester}-{uuid.uuid4().hex[:12]}", algorithm, tuple(inputs), requester, dict(parameters or {}))

    def with_inputs(self, inputs: Iterable[str]) -> "JobSpec":
        return JobSpec(self.job_id, self.algorithm, tuple(inputs), self.requester, dict(self.parameters))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "job_id": self.job_id,
            "algorithm": self.algorithm,
            "inputs": list(self.inputs),
            "requester": self.requester,
            "parameters": dict(self.parameters),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "JobSpec":
        try:
            spec = cls(
                str(data["job_id"]), str(data["algorithm"]), tuple(data.get("inputs") or ()),
                str(data["requester"]), dict(data.get("parameters") or {}),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise Malformed(f"JobSpec inválido: {e}")
        check_algorithm(spec.algorithm)
        return spec


@dataclass(frozen=True)
class JobEntry:
    lfn: str
    status: str  # ok, error, unreachable
    output: Dict[str, Any] = field(default_factory=dict)
    error: str = ""
    executed_at: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {
            "lfn": self.lfn,
            "status": self.status,
            "output": dict(self.output),
            "error": self.error,
            "executed_at": self.executed_at,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "JobEntry":
        return cls(
            str(data["lfn"]), str(data["status"]), dict(data.get("output") or {}),
            str(data.get("error") or ""), str(data.get("executed_at") or ""),
        )


@dataclass(frozen=True)
class JobResult:
    job_id: str
    algorithm: str
    entries: Dict[str, JobEntry]
    unreachable: Tuple[str, ...] = ()

    @property
    def status(self) -> str:
        if not self.entries:
            return "COMPLETE"
        ok = sum(1 for e in self.entries.values() if e.status == "ok")
        if ok == len(self.entries):
            return "COMPLETE"
        return "FAILED" if ok == 0 else "PARTIAL"

    def outputs(self) -> Dict[str, Dict[str, Any]]:
        return {lfn: e.output for lfn, e in self.entries.items() if e.status == "ok"}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "job_id": self.job_id,
            "algorithm": self.algorithm,
            "status": self.status,
            "entries": [self.entries[lfn].to_dict() for lfn in sorted(self.entries)],
            "unreachable": list(self.unreachable),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "JobResult":
        try:
            entries = [JobEntry.from_dict(e) for e in data.get("entries") or []]
            return cls(str(data["job_id"]), str(data["algorithm"]), {e.lfn: e for e in entries},
                       tuple(data.get("unreachable") or ()))
        except (KeyError, TypeError) as e:
            raise Malformed(f"JobResult inválido: {e}")


def execute_entries(spec: JobSpec, blobs: Dict[str, bytes], node_id: str) -> Dict[str, JobEntry]:
    """Roda o algoritmo em cada blob; falhas de domínio ficam na entrada daquele lfn"""
    params = parse_params(spec.algorithm, spec.parameters)
    entries = {}
    for lfn in spec.inputs:
        try:
            output = ALGORITHMS[spec.algorithm](blobs[lfn], params)
            entries[lfn] = JobEntry(lfn, "ok", output, "", node_id)
        except GridError as e:
            entries[lfn] = JobEntry(lfn, "error", {}, f"{e.name}: {e.detail}", node_id)
    return entries


def lfn_site(lfn: str) -> str:
    """Primeiro componente do LFN: o nó de origem"""
    return lfn.split("/")[1] if lfn.count("/") >= 2 else ""


def qc_summary(result: JobResult) -> pd.DataFrame:
    """
    Comparação de controle de qualidade entre centros: contagem, brilho
    médio e contraste médio por site de origem.
    """
    rows = [
        {"site": lfn_site(lfn), "mean_brightness": out["mean_brightness"], "contrast": out["contrast"]}
        for lfn, out in result.outputs().items()
        if "mean_brightness" in out
    ]
    if not rows:
        return pd.DataFrame(columns=["site", "images", "mean_brightness", "contrast"])
    df = pd.DataFrame(rows)
    summary = df.groupby("site").agg(
        images=("mean_brightness", "size"),
        mean_brightness=("mean_brightness", "mean"),
        contrast=("contrast", "mean"),
    ).reset_index()
    return summary.sort_values("site").reset_index(drop=True)
