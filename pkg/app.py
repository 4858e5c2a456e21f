"""
app.py - MamoRede v1.0
Cliente de linha de comando: servidores, ingestão, consultas federadas e jobs

Códigos de saída: 0 sucesso, 1 erro do usuário, 2 erro de ambiente,
3 sucesso degradado (resultado parcial).
"""

import argparse
import json
import logging
import os
import signal
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Dict, List, Optional, Sequence, TextIO, Tuple

import pandas as pd

# Adiciona diretório raiz ao path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config import CONFIG, CatalogueConfig, CliConfig, NodeConfig
from core.anonymizer import SiteKey
from core.auth_service import AuthToken
from core.catalogue_server import CatalogueService
from core.client import GridClient
from core.corpus import generate_corpus
from core.jobs import JobResult, qc_summary
from core.node import LOG_FORMAT, GridBox
from core.protocol import GridError, InternalError, Truncated, canonical_json
from core.query import ResultSet


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USER = 1
EXIT_ENV = 2
EXIT_PARTIAL = 3


class UsageError(Exception):
    pass


def _parse_params(items: Optional[List[str]]) -> Dict[str, str]:
    params = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"parâmetro inválido {item!r} (esperado chave=valor)")
        params[key] = value
    return params


def _cell(value: Any) -> Any:
    if isinstance(value, (list, dict)):
        return canonical_json(value)
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mamorede", description=CONFIG.app_title)
    parser.add_argument("--node", help="endereço host:porta do nó alvo")
    parser.add_argument("--token", help="arquivo de token (node_id e segredo)")
    parser.add_argument("--format", choices=("table", "st"), default="table", dest="output_format")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve-node", help="inicia um grid-box")
    p.add_argument("--config", required=True)

    p = sub.add_parser("serve-catalogue", help="inicia o catálogo virtual de arquivos")
    p.add_argument("--config", required=True)

    p = sub.add_parser("keygen", help="gera a chave secreta do site")
    p.add_argument("--out", required=True)

    p = sub.add_parser("ingest", help="ingere contêineres de estudo no nó alvo")
    p.add_argument("paths", nargs="+")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("query", help="consulta federada")
    p.add_argument("text")

    p = sub.add_parser("job", help="job de análise federado")
    p.add_argument("algorithm")
    p.add_argument("lfns", nargs="*")
    p.add_argument("--where", help="predicado sobre imagens que seleciona as entradas")
    p.add_argument("--param", action="append", help="parâmetro chave=valor")
    p.add_argument("--threshold", type=int, help="limiar de posicionamento em bytes")
    p.add_argument("--explain", action="store_true", help="mostra as decisões de posicionamento")
    p.add_argument("--summary", action="store_true", help="resumo de QC por site")

    p = sub.add_parser("gen-corpus", help="gera um corpus sintético")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("catalogue", help="consulta o catálogo via nó alvo")
    cat = p.add_subparsers(dest="action", required=True)
    ls = cat.add_parser("ls")
    ls.add_argument("prefix", nargs="?", default="/")
    ls.add_argument("--limit", type=int, default=CONFIG.list_page_limit)
    rs = cat.add_parser("resolve")
    rs.add_argument("lfn")
    return parser


class MamoRedeCli:
    """
    Uma invocação, um nó alvo. Saída em tabela (pandas) ou em texto
    estruturado: uma linha JSON canônica de cabeçalho e uma por linha.
    """

    def __init__(self, stdout: Optional[TextIO] = None, stderr: Optional[TextIO] = None) -> None:
        self.stdout = stdout or sys.stdout
        self.stderr = stderr or sys.stderr
        self.config: Optional[CliConfig] = None
        self.output_format = "table"
        self.token: Optional[AuthToken] = None

    # ------------------------------------------------------------ saída

    def _out(self, line: str = "") -> None:
        print(line, file=self.stdout)

    def _err(self, line: str) -> None:
        print(line, file=self.stderr)

    def _emit(self, header: Dict[str, Any], rows: List[Dict[str, Any]], columns: Sequence[str]) -> None:
        if self.output_format == "st":
            self._out(canonical_json(header))
            for row in rows:
                self._out(canonical_json(row))
            return
        table = pd.DataFrame([{c: _cell(r.get(c)) for c in columns} for r in rows], columns=list(columns))
        if table.empty:
            self._out("  ".join(columns))
        else:
            self._out(table.to_string(index=False))

    def _flat_rows(self, rows: List[Dict[str, Any]], fixed: Sequence[str], nested: str) -> Tuple[List[Dict], List[str]]:
        extra: List[str] = []
        flat = []
        for row in rows:
            item = {k: row.get(k) for k in fixed}
            for key, value in (row.get(nested) or {}).items():
                if key not in extra:
                    extra.append(key)
                item[key] = value
            flat.append(item)
        return flat, list(fixed) + extra

    # ------------------------------------------------------------ conexão

    def _setup(self, args: argparse.Namespace, needs_node: bool) -> None:
        self.output_format = args.output_format
        if not needs_node:
            return
        if not args.node or not args.token:
            raise UsageError("--node e --token são obrigatórios para este comando")
        try:
            self.config = CliConfig(args.node, args.token, args.output_format)
        except ValueError as e:
            raise UsageError(str(e))
        try:
            self.token = AuthToken.from_file(args.token)
        except (KeyError, ValueError) as e:
            raise UsageError(f"token inválido em {args.token}: {e}")

    def _client(self) -> GridClient:
        return GridClient(self.config.node_address, self.token)

    # ------------------------------------------------------------ comandos

    def cmd_serve_node(self, args: argparse.Namespace) -> int:
        box = GridBox(NodeConfig.from_file(args.config)).start()
        self._out(f"{box.config.node_id} atendendo em {box.address}")
        try:
            self._wait_for_signal()
        finally:
            box.stop()
        return EXIT_OK

    def cmd_serve_catalogue(self, args: argparse.Namespace) -> int:
        service = CatalogueService(CatalogueConfig.from_file(args.config)).start()
        self._out(f"catálogo atendendo em {service.address}")
        try:
            self._wait_for_signal()
        finally:
            service.stop()
        return EXIT_OK

    @staticmethod
    def _wait_for_signal() -> None:
        stop = threading.Event()
        for sig in (signal.SIGINT, signal.SIGTERM):
            signal.signal(sig, lambda *_: stop.set())
        while not stop.wait(1.0):
            pass

    def cmd_keygen(self, args: argparse.Namespace) -> int:
        try:
            SiteKey.generate(args.out)
        except FileExistsError as e:
            raise UsageError(str(e))
        self._out(f"chave de site gravada em {args.out}")
        return EXIT_OK

    def cmd_ingest(self, args: argparse.Namespace) -> int:
        """Uma linha OK/FALHA por arquivo e uma linha de resumo"""
        paths = [os.path.abspath(p) for p in args.paths]

        def _one(path: str) -> Tuple[str, Any]:
            try:
                with self._client() as client:
                    return "OK", client.ingest(path)
            except GridError as e:
                return "FALHA", f"{e.name}: {e.detail}"

        workers = max(1, args.jobs)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_one, paths))
        ok = 0
        for path, (status, detail) in zip(args.paths, outcomes):
            if status == "OK":
                ok += 1
                self._out(f"OK {path} {detail['study_id']} {len(detail['lfns'])} imagens")
            else:
                self._out(f"FALHA {path} {detail}")
        failed = len(paths) - ok
        self._out(f"{ok} ingeridos, {failed} falhas")
        return EXIT_OK if failed == 0 else EXIT_USER

    def cmd_query(self, args: argparse.Namespace) -> int:
        with self._client() as client:
            result = client.federated_query(args.text)
        self._render_resultset(result)
        return self._degraded(result.unreachable)

    def _render_resultset(self, result: ResultSet) -> None:
        header = {
            "kind": result.kind,
            "projection": list(result.projection),
            "status": result.status,
            "answered": list(result.answered),
            "unreachable": list(result.unreachable),
            "count": len(result.rows),
        }
        rows = [{"record_id": r.record_id, "values": dict(r.values)} for r in result.rows]
        if self.output_format == "st":
            self._emit(header, rows, ())
            return
        flat, columns = self._flat_rows(rows, ("record_id",), "values")
        if result.projection:
            columns = ["record_id"] + list(result.projection)
        self._emit(header, flat, columns)

    def _degraded(self, unreachable: Sequence[str]) -> int:
        if unreachable:
            self._err(f"AVISO: resultado parcial; nós inalcançáveis: {', '.join(unreachable)}")
            return EXIT_PARTIAL
        return EXIT_OK

    def cmd_job(self, args: argparse.Namespace) -> int:
        params = _parse_params(args.param)
        if not args.lfns and not args.where:
            raise UsageError("informe LFNs ou --where")
        with self._client() as client:
            reply = client.federated_job(args.algorithm, args.lfns, args.where, params, args.threshold)
        result = JobResult.from_dict(reply)
        placement = reply.get("placement") or {}

        if args.explain:
            self._emit(
                {"section": "placement", "threshold": placement.get("threshold"),
                 "total_bytes": placement.get("total_bytes"), "bytes_moved": reply.get("bytes_moved")},
                list(placement.get("choices") or []),
                ("lfn", "mode", "node_id", "size_bytes", "rationale"),
            )
        entries = [e.to_dict() for e in (result.entries[lfn] for lfn in sorted(result.entries))]
        header = {"section": "result", "job_id": result.job_id, "algorithm": result.algorithm,
                  "status": result.status, "unreachable": list(result.unreachable), "count": len(entries)}
        if self.output_format == "st":
            self._emit(header, entries, ())
        else:
            flat, columns = self._flat_rows(entries, ("lfn", "status", "executed_at", "error"), "output")
            self._emit(header, flat, columns)
        if args.summary:
            summary = qc_summary(result)
            self._emit({"section": "summary", "sites": len(summary)},
                       summary.to_dict(orient="records"), list(summary.columns))
        if result.unreachable:
            return self._degraded(result.unreachable)
        if result.status != "COMPLETE":
            self._err(f"AVISO: job {result.status}; veja a coluna error")
            return EXIT_PARTIAL
        return EXIT_OK

    def cmd_gen_corpus(self, args: argparse.Namespace) -> int:
        if args.n < 0:
            raise UsageError("--n deve ser não negativo")
        studies = generate_corpus(args.n, args.seed, args.out)
        images = sum(len(s.images) for s in studies)
        self._out(f"{len(studies)} estudos ({images} imagens) gravados em {args.out}")
        return EXIT_OK

    def cmd_catalogue(self, args: argparse.Namespace) -> int:
        with self._client() as client:
            if args.action == "resolve":
                replicas = [r.to_dict() for r in client.resolve(args.lfn)]
                self._emit({"lfn": args.lfn, "replicas": len(replicas)}, replicas,
                           ("node_id", "local_path", "size_bytes", "checksum", "registered_at"))
                return EXIT_OK
            names: List[str] = []
            token = None
            while True:
                page = client.list(args.prefix, args.limit, token)
                names.extend(page.names)
                token = page.next_token
                if not token:
                    break
        self._emit({"prefix": args.prefix, "count": len(names)}, [{"lfn": n} for n in names], ("lfn",))
        return EXIT_OK

    # ------------------------------------------------------------ execução

    COMMANDS = {
        "serve-node": ("cmd_serve_node", False),
        "serve-catalogue": ("cmd_serve_catalogue", False),
        "keygen": ("cmd_keygen", False),
        "ingest": ("cmd_ingest", True),
        "query": ("cmd_query", True),
        "job": ("cmd_job", True),
        "gen-corpus": ("cmd_gen_corpus", False),
        "catalogue": ("cmd_catalogue", True),
    }

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        parser = build_parser()
        try:
            args = parser.parse_args(argv)
        except SystemExit as e:
            return EXIT_OK if e.code == 0 else EXIT_USER
        method, needs_node = self.COMMANDS[args.command]
        try:
            self._setup(args, needs_node)
            return getattr(self, method)(args)
        except UsageError as e:
            self._err(f"ERRO: {e}")
            return EXIT_USER
        except GridError as e:
            self._err(f"ERRO: {e.name}: {e.detail}")
            return EXIT_ENV if isinstance(e, (Truncated, InternalError)) else EXIT_USER
        except (OSError, ValueError, TypeError, json.JSONDecodeError) as e:
            self._err(f"ERRO de ambiente: {e}")
            return EXIT_ENV


def main() -> None:
    """Função de entrada principal"""
    logging.basicConfig(level=logging.WARNING, format=LOG_FORMAT)
    sys.exit(MamoRedeCli().run(sys.argv[1:]))


if __name__ == "__main__":
    main()
