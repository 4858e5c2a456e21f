"""
node.py - Grid-box: ponto único de entrada de um hospital na federação

Ingestão de estudos, armazenamento local de imagens e metadados,
sub-consultas, entrega de imagens e execução de jobs.
"""

import base64
import json
import logging
import os
import threading
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Dict, List, Optional, Set, Tuple, Union

from config import CONFIG, NodeConfig
from .anonymizer import Anonymizer, ReidentificationMap, SiteKey
from .auth_service import AuditLog, Auth, AuthToken, Roster, Session
from .backup import BackupManager
from .blob_store import BlobStore, StagedBlob
from .catalogue import ReplicaEntry, validate_lfn
from .client import CatalogueClient, GridClient
from .container import StudyContainer, encode_blob, read_container
from .database import Database
from .imaging import qc_metrics
from .jobs import JobResult, JobSpec, check_algorithm, execute_entries, parse_params
from .mediator import Mediator, PlacementDecision
from .metamodel import MetadataRecord, SchemaRegistry, load_baseline
from .protocol import Conflict, GridError, Malformed, MessageKind, NotFound, Unauthorized
from .query import ResultSet, SubQuery, check_predicate, evaluate
from .record_store import RecordStore
from .server import GridServer


logger = logging.getLogger(__name__)

SYSTEM_USER = "SISTEMA"
LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"


def study_lfn(node_id: str, pseudonym: str, study_id: str, laterality: str, view: str) -> str:
    return f"/{node_id}/patient-{pseudonym}/study-{study_id}/img-{laterality}-{view}.smi"


def install_file_log(path: str) -> logging.Handler:
    """Acrescenta (uma vez por arquivo) um FileHandler ao logger raiz"""
    root = logging.getLogger()
    target = os.path.abspath(path)
    for handler in root.handlers:
        if isinstance(handler, logging.FileHandler) and handler.baseFilename == target:
            return handler
    os.makedirs(os.path.dirname(target), exist_ok=True)
    handler = logging.FileHandler(target, encoding="utf-8")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    if root.level > logging.INFO or root.level == logging.NOTSET:
        root.setLevel(logging.INFO)
    return handler


@dataclass(frozen=True)
class IngestReport:
    study_id: str
    record_ids: List[str] = field(default_factory=list)
    lfns: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {"study_id": self.study_id, "record_ids": list(self.record_ids), "lfns": list(self.lfns)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "IngestReport":
        return cls(str(data["study_id"]), list(data.get("record_ids") or []), list(data.get("lfns") or []))


@dataclass
class _PreparedImage:
    lfn: str
    staged: StagedBlob
    values: Dict[str, Any]
    annotations: Tuple[Dict[str, Any], ...]


class NodeService:
    """Operações do grid-box sobre o armazenamento local"""

    def __init__(self, node_id: str, db: Database, registry: SchemaRegistry, records: RecordStore,
                 blobs: BlobStore, anonymizer: Anonymizer, catalogue: Any,
                 audit: Optional[AuditLog] = None, job_workers: int = CONFIG.job_workers) -> None:
        self.node_id = node_id
        self.db = db
        self.registry = registry
        self.records = records
        self.blobs = blobs
        self.anonymizer = anonymizer
        self.catalogue = catalogue
        self.audit = audit
        self.mediator: Optional[Mediator] = None
        self._job_slots = threading.BoundedSemaphore(max(1, job_workers))
        self._ingest_lock = threading.Lock()
        self._commit_lock = threading.Lock()
        self._in_flight: Set[str] = set()

    @classmethod
    def open(cls, node_id: str, data_dir: str, catalogue: Any, site_key: SiteKey,
             schema_dir: str = CONFIG.schema_dir, job_workers: int = CONFIG.job_workers) -> "NodeService":
        """Monta o serviço sobre o diretório de dados do nó"""
        os.makedirs(data_dir, exist_ok=True)
        db = Database(os.path.join(data_dir, "node.db"))
        db.init_schema()
        registry = SchemaRegistry(os.path.join(data_dir, "schemas"))
        load_baseline(registry, schema_dir)
        records = RecordStore(db, registry, node_id)
        blobs = BlobStore(os.path.join(data_dir, "blobs"))
        reid_map = ReidentificationMap(os.path.join(data_dir, "reid.map"), site_key)
        return cls(node_id, db, registry, records, blobs, Anonymizer(site_key, reid_map), catalogue,
                   AuditLog(db), job_workers)

    def _registrar(self, usuario: str, modulo: str, acao: str, detalhes: str = "", peer: str = "-") -> None:
        if self.audit is None:
            return
        try:
            self.audit.registrar(usuario, modulo, acao, detalhes, peer)
        except Exception as e:
            logger.error(f"Falha ao gravar auditoria: {e}")

    # ------------------------------------------------------------ ingestão

    def ingest_study(self, source: Union[str, bytes], usuario: str = SYSTEM_USER, peer: str = "-") -> IngestReport:
        """
        Ingere um estudo: parse, anonimização, QC, blobs, catálogo e
        registros. Tudo ou nada por estudo.

        Raises:
            Malformed: contêiner inválido
            ConsentMissing: paciente sem consentimento
            Conflict: study_id já ingerido
        """
        if isinstance(source, str):
            try:
                with open(source, "rb") as f:
                    data = f.read()
            except OSError as e:
                raise NotFound(f"contêiner ilegível: {e}")
        else:
            data = bytes(source)
        container = read_container(data)
        # identificadores saem aqui; nada abaixo vê nome, id ou nascimento
        sanitized, extracted = self.anonymizer.strip_identifiers(container.header, remember=False)
        study_id = str(sanitized.get("study_id") or "")
        if not study_id:
            raise Malformed("estudo sem study_id")

        with self._ingest_lock:
            existing = self.db.fetchone("SELECT record_id FROM studies WHERE study_id = ?", (study_id,))
            if existing is not None or study_id in self._in_flight:
                raise Conflict(f"estudo {study_id} já ingerido")
            self._in_flight.add(study_id)
        try:
            report = self._ingest(container, sanitized, study_id)
            # o mapa só recebe pacientes de estudos confirmados
            self.anonymizer.remember(sanitized["pseudonym"], extracted)
        finally:
            with self._ingest_lock:
                self._in_flight.discard(study_id)
        self._registrar(usuario, "INGESTAO", "Estudo ingerido",
                        f"{study_id}: {len(report.lfns)} imagens, {len(report.record_ids)} registros", peer)
        logger.info(f"Estudo {study_id} ingerido em {self.node_id}: {len(report.lfns)} imagens")
        return report

    def _prepare(self, container: StudyContainer, sanitized: Dict[str, Any], study_id: str) -> List[_PreparedImage]:
        prepared: List[_PreparedImage] = []
        seen: Set[str] = set()
        try:
            for image in container.images:
                lfn = validate_lfn(study_lfn(self.node_id, sanitized["pseudonym"], study_id,
                                             image.laterality, image.view))
                if lfn in seen:
                    raise Malformed(f"incidência repetida no estudo: {image.laterality}-{image.view}")
                seen.add(lfn)
                report = qc_metrics(image.volume)
                staged = self.blobs.stage(encode_blob(image))
                values = {
                    "view": image.view,
                    "laterality": image.laterality,
                    "lfn": lfn,
                    "checksum": staged.checksum,
                    "width": image.width,
                    "height": image.height,
                    "spacing_mm": image.volume.spacing_mm,
                    "mean_brightness": report.mean_brightness,
                    "contrast": report.contrast,
                    "site": self.node_id,
                }
                values.update(image.acquisition.to_dict())
                prepared.append(_PreparedImage(lfn, staged, values, image.annotations))
        except Exception:
            for item in prepared:
                self.blobs.discard(item.staged)
            raise
        return prepared

    def _build_records(self, sanitized: Dict[str, Any], study_id: str,
                       prepared: List[_PreparedImage]) -> Tuple[List[MetadataRecord], str]:
        pseudonym = sanitized["pseudonym"]
        patient = next((r for r in self.records.by_kind("patient") if r.values.get("pseudonym") == pseudonym), None)
        n_annotations = sum(len(p.annotations) for p in prepared)
        ids = iter(self.records.allocate_ids((0 if patient else 1) + 1 + len(prepared) + n_annotations))

        new: List[MetadataRecord] = []
        if patient is None:
            values = {"pseudonym": pseudonym, "site": self.node_id}
            if sanitized.get("birth_year") is not None:
                values["birth_year"] = sanitized["birth_year"]
            patient = self._record(next(ids), "patient", values)
            new.append(patient)

        lateralities = sorted({p.values["laterality"] for p in prepared})
        study_values = {
            "patient": patient.record_id,
            "study_id": study_id,
            "laterality": lateralities[0] if len(lateralities) == 1 else "LR",
            "site": self.node_id,
        }
        if sanitized.get("study_date"):
            study_values["study_date"] = sanitized["study_date"]
        study = self._record(next(ids), "study", study_values)
        new.append(study)

        for item in prepared:
            image = self._record(next(ids), "image", dict(item.values, study=study.record_id))
            new.append(image)
            item.values["record_id"] = image.record_id
            for annotation in item.annotations:
                values = {k: v for k, v in annotation.items() if v is not None}
                values.update(image=image.record_id, site=self.node_id)
                new.append(self._record(next(ids), "annotation", values))
        return new, study.record_id

    def _record(self, record_id: str, kind: str, values: Dict[str, Any]) -> MetadataRecord:
        return MetadataRecord(record_id, kind, self.registry.get(kind).version, values, self.node_id)

    def _ingest(self, container: StudyContainer, sanitized: Dict[str, Any], study_id: str) -> IngestReport:
        prepared = self._prepare(container, sanitized, study_id)
        registered: List[str] = []
        promoted: List[str] = []
        try:
            for item in prepared:
                replica = ReplicaEntry(item.lfn, self.node_id, BlobStore.local_path(item.staged.checksum),
                                       item.staged.size_bytes, item.staged.checksum)
                self.catalogue.register_file(item.lfn, replica)
                registered.append(item.lfn)
            with self._commit_lock:
                for item in prepared:
                    if self.blobs.promote(item.staged):
                        promoted.append(item.staged.checksum)
                records, study_rid = self._build_records(sanitized, study_id, prepared)

                def _extra(conn):
                    for item in prepared:
                        conn.execute(
                            "INSERT INTO local_files (lfn, checksum, size_bytes, record_id) VALUES (?, ?, ?, ?)",
                            (item.lfn, item.staged.checksum, item.staged.size_bytes, item.values["record_id"]),
                        )
                    conn.execute("INSERT INTO studies (study_id, record_id) VALUES (?, ?)", (study_id, study_rid))

                self.records.insert(records, extra=_extra)
        except Exception as e:
            logger.warning(f"Ingestão de {study_id} desfeita: {e}")
            self._rollback(prepared, registered, promoted)
            raise
        return IngestReport(study_id, [r.record_id for r in records], [p.lfn for p in prepared])

    def _rollback(self, prepared: List[_PreparedImage], registered: List[str], promoted: List[str]) -> None:
        for lfn in registered:
            try:
                self.catalogue.remove_replica(lfn, self.node_id)
            except (GridError, OSError) as e:
                logger.error(f"Não foi possível remover {lfn} do catálogo: {e}")
        with self._commit_lock:
            for checksum in promoted:
                # outro estudo confirmado pode ter o mesmo conteúdo
                if self.db.fetchone("SELECT lfn FROM local_files WHERE checksum = ?", (checksum,)) is None:
                    self.blobs.delete(checksum)
        for item in prepared:
            self.blobs.discard(item.staged)

    # ------------------------------------------------------------ consultas e imagens

    def local_query(self, sub: SubQuery) -> ResultSet:
        """
        Avalia a sub-consulta apenas sobre os metadados deste nó.

        Raises:
            NotFound: tipo de registro desconhecido
            Malformed: predicado ou projeção inválidos
        """
        schema = self.registry.get(sub.kind)
        check_predicate(sub.predicate, schema)
        unknown = [a for a in sub.projection if schema.attribute(a) is None]
        if unknown:
            raise Malformed(f"atributos desconhecidos em {sub.kind}: {', '.join(unknown)}")
        return evaluate(self.records.by_kind(sub.kind), sub, schema, self.node_id)

    def _local_checksum(self, lfn: str) -> str:
        row = self.db.fetchone("SELECT checksum FROM local_files WHERE lfn = ?", (lfn,))
        if row is None:
            raise NotFound(f"{lfn} não tem réplica em {self.node_id}")
        return row["checksum"]

    def fetch_image(self, lfn: str) -> Tuple[bytes, str]:
        """Bytes exatos armazenados; o receptor confere o checksum"""
        validate_lfn(lfn)
        checksum = self._local_checksum(lfn)
        return self.blobs.get(checksum), checksum

    def local_files(self) -> List[Dict[str, Any]]:
        rows = self.db.fetchall("SELECT lfn, checksum, size_bytes, record_id FROM local_files ORDER BY lfn")
        return [dict(r) for r in rows]

    def import_records(self, records: List[MetadataRecord]) -> int:
        return self.records.import_records(records)

    # ------------------------------------------------------------ jobs

    def _job_started(self, spec: JobSpec) -> None:
        self.db.execute(
            """
            INSERT INTO jobs (job_id, algorithm, requester, status, submitted_at, finished_at, result_json)
            VALUES (?, ?, ?, 'RUNNING', ?, NULL, NULL)
            ON CONFLICT(job_id) DO UPDATE SET status = 'RUNNING', finished_at = NULL
            """,
            (spec.job_id, spec.algorithm, spec.requester, datetime.now().strftime("%Y-%m-%d %H:%M:%S")),
        )

    def _job_finished(self, result: JobResult) -> None:
        self.db.execute(
            "UPDATE jobs SET status = ?, finished_at = ?, result_json = ? WHERE job_id = ?",
            (result.status, datetime.now().strftime("%Y-%m-%d %H:%M:%S"),
             json.dumps(result.to_dict(), sort_keys=True), result.job_id),
        )

    def run_job(self, spec: JobSpec) -> JobResult:
        """
        Executa o algoritmo sobre réplicas locais.

        Raises:
            UnknownAlgorithm: algoritmo fora do conjunto registrado
            NotFound: alguma entrada sem réplica local (nada é executado)
        """
        check_algorithm(spec.algorithm)
        parse_params(spec.algorithm, spec.parameters)
        checksums = {lfn: self._local_checksum(lfn) for lfn in spec.inputs}
        self._job_started(spec)
        with self._job_slots:
            try:
                blobs = {lfn: self.blobs.get(checksum) for lfn, checksum in checksums.items()}
                result = JobResult(spec.job_id, spec.algorithm, execute_entries(spec, blobs, self.node_id))
            except Exception:
                self.db.execute("UPDATE jobs SET status = 'FAILED' WHERE job_id = ?", (spec.job_id,))
                raise
        self._job_finished(result)
        logger.info(f"Job {spec.job_id} ({spec.algorithm}) em {self.node_id}: {result.status}")
        return result

    def run_on_blobs(self, spec: JobSpec, blobs: Dict[str, bytes]) -> JobResult:
        """Execução sobre bytes trazidos de outros nós (transitórios)"""
        with self._job_slots:
            return JobResult(spec.job_id, spec.algorithm, execute_entries(spec, blobs, self.node_id))

    def job_status(self, job_id: str) -> Dict[str, Any]:
        row = self.db.fetchone(
            "SELECT job_id, algorithm, requester, status, submitted_at, finished_at FROM jobs WHERE job_id = ?",
            (job_id,),
        )
        if row is None:
            raise NotFound(f"job desconhecido: {job_id}")
        return dict(row)

    def job_result(self, job_id: str) -> JobResult:
        row = self.db.fetchone("SELECT status, result_json FROM jobs WHERE job_id = ?", (job_id,))
        if row is None:
            raise NotFound(f"job desconhecido: {job_id}")
        if not row["result_json"]:
            raise NotFound(f"job {job_id} sem resultado ({row['status']})")
        return JobResult.from_dict(json.loads(row["result_json"]))

    def jobs(self, limit: int = 100):
        return self.db.read_sql(
            "SELECT job_id, algorithm, requester, status, submitted_at, finished_at FROM jobs "
            "ORDER BY submitted_at DESC LIMIT ?",
            (limit,),
        )

    # ------------------------------------------------------------ federação

    def _require_mediator(self) -> Mediator:
        if self.mediator is None:
            raise Malformed(f"{self.node_id} não participa de uma federação")
        return self.mediator

    def federated_query(self, text: str) -> ResultSet:
        return self._require_mediator().execute_federated(text)

    def federated_job(self, algorithm: str, inputs: Optional[List[str]] = None, where: Optional[str] = None,
                      parameters: Optional[Dict[str, Any]] = None,
                      threshold: Optional[int] = None) -> Tuple[JobResult, PlacementDecision]:
        """
        Job sobre a federação: entradas explícitas e/ou selecionadas por
        predicado sobre imagens.
        """
        mediator = self._require_mediator()
        selected = list(inputs or [])
        if where:
            selected.extend(mediator.select_inputs(where))
        for lfn in selected:
            validate_lfn(lfn)
        spec = JobSpec.create(algorithm, dict.fromkeys(selected), self.node_id, parameters)
        self._job_started(spec)
        try:
            result, decision = mediator.run_federated_job(spec, threshold)
        except Exception:
            self.db.execute("UPDATE jobs SET status = 'FAILED' WHERE job_id = ?", (spec.job_id,))
            raise
        self._job_finished(result)
        logger.info(f"Job federado {spec.job_id}: {len(result.entries)} entradas, {result.status}")
        return result, decision


class NodeServer(GridServer):
    """Tabela de despacho do nó, com autorização por papel e auditoria"""

    def __init__(self, service: NodeService, listen_address: str, auth: Auth,
                 socket_timeout: float = CONFIG.socket_timeout) -> None:
        super().__init__(listen_address, service.node_id, auth, service.audit, socket_timeout)
        self.service = service
        self.add(MessageKind.SUBQUERY, self._subquery)
        self.add(MessageKind.FED_QUERY, self._fed_query)
        self.add(MessageKind.JOB_SUBMIT, self._job_submit)
        self.add(MessageKind.JOB_STATUS, self._job_status)
        self.add(MessageKind.JOB_RESULT, self._job_result)
        self.add(MessageKind.FED_JOB, self._fed_job)
        self.add(MessageKind.FETCH_IMAGE, self._fetch_image)
        self.add(MessageKind.INGEST, self._ingest)
        self.add(MessageKind.CAT_RESOLVE, self._cat_resolve)
        self.add(MessageKind.CAT_LIST, self._cat_list)

    def _require(self, session: Session, level: str, modulo: str) -> None:
        try:
            Auth.exigir(session, level)
        except Unauthorized as e:
            self.audit_event(session.node_id, modulo, "Acesso negado", e.detail, session.peer)
            raise

    def _subquery(self, session: Session, body: Dict[str, Any]):
        return MessageKind.RESULTSET, self.service.local_query(SubQuery.from_dict(body)).to_dict()

    def _fed_query(self, session: Session, body: Dict[str, Any]):
        text = body.get("query")
        if not isinstance(text, str):
            raise Malformed("FED_QUERY requer o campo query")
        return MessageKind.RESULTSET, self.service.federated_query(text).to_dict()

    def _job_submit(self, session: Session, body: Dict[str, Any]):
        self._require(session, "NODE", "JOBS")
        spec = JobSpec.from_dict(body)
        self.audit_event(session.node_id, "JOBS", "Job submetido",
                         f"{spec.job_id}: {spec.algorithm} sobre {len(spec.inputs)} imagens", session.peer)
        return MessageKind.JOB_RESULT, self.service.run_job(spec).to_dict()

    def _job_status(self, session: Session, body: Dict[str, Any]):
        return MessageKind.JOB_STATUS, self.service.job_status(str(body.get("job_id", "")))

    def _job_result(self, session: Session, body: Dict[str, Any]):
        return MessageKind.JOB_RESULT, self.service.job_result(str(body.get("job_id", ""))).to_dict()

    def _fed_job(self, session: Session, body: Dict[str, Any]):
        algorithm = body.get("algorithm")
        if not isinstance(algorithm, str):
            raise Malformed("FED_JOB requer o campo algorithm")
        threshold = body.get("threshold")
        result, decision = self.service.federated_job(
            algorithm,
            inputs=list(body.get("inputs") or []),
            where=body.get("where"),
            parameters=dict(body.get("parameters") or {}),
            threshold=int(threshold) if threshold is not None else None,
        )
        self.audit_event(session.node_id, "JOBS", "Job federado",
                         f"{result.job_id}: {algorithm} sobre {len(result.entries)} imagens", session.peer)
        reply = result.to_dict()
        reply["placement"] = decision.to_dict()
        reply["bytes_moved"] = decision.bytes_moved(self.service.node_id)
        return MessageKind.JOB_RESULT, reply

    def _fetch_image(self, session: Session, body: Dict[str, Any]):
        self._require(session, "NODE", "IMAGENS")
        lfn = str(body.get("lfn", ""))
        data, checksum = self.service.fetch_image(lfn)
        return MessageKind.IMAGE_DATA, {
            "lfn": lfn,
            "checksum": checksum,
            "size_bytes": len(data),
            "data": base64.b64encode(data).decode("ascii"),
        }

    def _ingest(self, session: Session, body: Dict[str, Any]):
        if session.node_id != self.service.node_id and session.role != "ADMIN":
            self.audit_event(session.node_id, "INGESTAO", "Acesso negado", "ingestão por outro nó", session.peer)
            raise Unauthorized(f"{session.node_id} não pode ingerir em {self.service.node_id}")
        path = body.get("path")
        if not isinstance(path, str) or not path:
            raise Malformed("INGEST requer o campo path")
        report = self.service.ingest_study(path, session.node_id, session.peer)
        return MessageKind.INGEST_OK, report.to_dict()

    def _cat_resolve(self, session: Session, body: Dict[str, Any]):
        replicas = self.service.catalogue.resolve(str(body.get("lfn", "")))
        return MessageKind.CAT_RESOLVE, {"replicas": [r.to_dict() for r in replicas]}

    def _cat_list(self, session: Session, body: Dict[str, Any]):
        page = self.service.catalogue.list(
            str(body.get("prefix") or "/"), int(body.get("limit") or CONFIG.list_page_limit), body.get("token"),
        )
        return MessageKind.CAT_LIST, page.to_dict()


class GridBox:
    """Processo do nó: serviços, servidor, catálogo remoto e snapshots"""

    def __init__(self, config: NodeConfig, roster: Optional[Roster] = None,
                 token: Optional[AuthToken] = None, site_key: Optional[SiteKey] = None) -> None:
        self.config = config
        self.roster = roster
        self.token = token
        self.site_key = site_key
        self.backup_manager: Optional[BackupManager] = None
        self.server: Optional[NodeServer] = None
        self._init_services()

    def _init_services(self) -> None:
        """Inicializa todos os serviços com injeção de dependências"""
        config = self.config
        config.check_data_dir()
        install_file_log(os.path.join(config.data_dir, "node.log"))
        self.roster = self.roster or Roster.from_file(config.roster_path)
        if self.roster.get(config.node_id) is None:
            raise ValueError(f"node_id {config.node_id} fora do roster")
        self.token = self.token or AuthToken.from_file(config.token_path)
        self.site_key = self.site_key or SiteKey.load(config.site_key_path)

        self.catalogue = CatalogueClient(config.catalogue_address, self.token)
        self.service = NodeService.open(config.node_id, config.data_dir, self.catalogue, self.site_key,
                                        job_workers=config.job_workers)
        self.service.mediator = Mediator(
            config.node_id, self.roster.live_nodes, self._connect, self.catalogue, self.service.registry,
            local=self.service, threshold=config.placement_threshold_bytes, max_workers=config.job_workers,
        )
        self.audit = self.service.audit

    def _connect(self, node_id: str) -> GridClient:
        address = self.roster.live_nodes().get(node_id)
        if address is None:
            raise ConnectionError(f"{node_id} sem endereço no roster")
        return GridClient(address, self.token)

    def _init_backup(self) -> None:
        """Inicializa os snapshots automáticos do banco do nó"""
        interval = self.config.backup_interval_hours
        if not interval or interval <= 0:
            return
        try:
            self.backup_manager = BackupManager(
                self.service.db.db_path, os.path.join(self.config.data_dir, "backups"), self.config.node_id,
            )
            self.backup_manager.start_auto_backup(interval_hours=interval, callback=self._on_backup_completed)
            self.audit.registrar(SYSTEM_USER, "BACKUP", "Snapshot automático iniciado", f"Intervalo: {interval} horas")
        except Exception as e:
            logger.error(f"Erro ao inicializar snapshot automático: {e}")

    def _on_backup_completed(self, backup_path: str) -> None:
        try:
            self.audit.registrar(SYSTEM_USER, "BACKUP", "Snapshot automático concluído",
                                 f"Arquivo: {os.path.basename(backup_path)}")
        except Exception as e:
            logger.error(f"Erro ao processar callback de snapshot: {e}")

    def _shutdown_backup(self) -> None:
        if self.backup_manager:
            self.backup_manager.stop_auto_backup()
            self.audit.registrar(SYSTEM_USER, "BACKUP", "Snapshot automático encerrado", "Nó finalizado")
            self.backup_manager = None

    @property
    def address(self) -> str:
        return self.server.address if self.server else self.config.listen_address

    def start(self) -> "GridBox":
        self.server = NodeServer(self.service, self.config.listen_address, Auth(self.roster))
        self.server.start()
        self._init_backup()
        self.audit.registrar(SYSTEM_USER, "NO", "Nó iniciado", self.server.address)
        return self

    def stop(self) -> None:
        self._shutdown_backup()
        if self.server:
            self.server.stop()
            self.server = None
        self.catalogue.close()
