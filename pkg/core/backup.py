"""
backup.py - Snapshots periódicos do banco de dados do nó
"""

import logging
import os
import sqlite3
import threading
from datetime import datetime, timedelta
from typing import Callable, Dict, List, Optional

import schedule


logger = logging.getLogger(__name__)


class BackupManager:
    """
    Snapshots do banco do nó (registros, réplicas locais, jobs e auditoria)
    via API de backup online do SQLite. Cada nó tem seu próprio agendador.
    """

    def __init__(self, db_path: str, backup_dir: str, node_id: str = "node", days_to_keep: int = 30) -> None:
        self.db_path = db_path
        self.backup_dir = backup_dir
        self.node_id = node_id
        self.days_to_keep = days_to_keep
        self._scheduler = schedule.Scheduler()
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        os.makedirs(backup_dir, exist_ok=True)

    @property
    def running(self) -> bool:
        return self._thread is not None and self._thread.is_alive()

    def _prefix(self) -> str:
        return f"snapshot_{self.node_id}_"

    def create_backup(self, suffix: str = "") -> Optional[str]:
        """
        Cria um snapshot do banco de dados

        Returns:
            Caminho do snapshot ou None em caso de erro
        """
        try:
            if not os.path.exists(self.db_path):
                logger.error(f"Banco de dados não encontrado: {self.db_path}")
                return None
            timestamp = datetime.now().strftime("%Y%m%d_%H%M%S_%f")
            suffix_part = f"_{suffix}" if suffix else ""
            backup_path = os.path.join(self.backup_dir, f"{self._prefix()}{timestamp}{suffix_part}.db")
            self._copy_database(self.db_path, backup_path, checkpoint=True)
            logger.info(f"Snapshot criado: {os.path.basename(backup_path)}")
            self._cleanup_old_backups()
            return backup_path
        except (sqlite3.Error, OSError) as e:
            logger.error(f"Erro ao criar snapshot: {e}")
            return None

    @staticmethod
    def _copy_database(source_path: str, dest_path: str, checkpoint: bool = False) -> None:
        source = sqlite3.connect(source_path)
        dest = sqlite3.connect(dest_path)
        try:
            if checkpoint:
                source.execute("PRAGMA wal_checkpoint(TRUNCATE);")
            with source:
                source.backup(dest, pages=1000)
        finally:
            source.close()
            dest.close()

    def _cleanup_old_backups(self) -> int:
        cutoff = datetime.now() - timedelta(days=self.days_to_keep)
        removidos = 0
        for snapshot in self.list_backups():
            if snapshot["modified"] < cutoff:
                try:
                    os.remove(snapshot["path"])
                    removidos += 1
                    logger.info(f"Snapshot antigo removido: {snapshot['filename']}")
                except OSError as e:
                    logger.error(f"Erro ao remover snapshot {snapshot['filename']}: {e}")
        return removidos

    def restore_backup(self, backup_path: str) -> bool:
        """Restaura um snapshot; um snapshot de segurança é criado antes"""
        if not os.path.exists(backup_path):
            logger.error(f"Snapshot não encontrado: {backup_path}")
            return False
        try:
            self.create_backup("before_restore")
            self._copy_database(backup_path, self.db_path)
            logger.info(f"Snapshot restaurado: {backup_path}")
            return True
        except (sqlite3.Error, OSError) as e:
            logger.error(f"Erro ao restaurar snapshot: {e}")
            return False

    def list_backups(self) -> List[Dict]:
        backups = []
        for filename in sorted(os.listdir(self.backup_dir), reverse=True):
            if not filename.startswith(self._prefix()) or not filename.endswith(".db"):
                continue
            path = os.path.join(self.backup_dir, filename)
            stat = os.stat(path)
            backups.append({
                "filename": filename,
                "path": path,
                "size": stat.st_size,
                "modified": datetime.fromtimestamp(stat.st_mtime),
            })
        return backups

    def start_auto_backup(self, interval_hours: float, callback: Optional[Callable[[str], None]] = None,
                          poll_seconds: float = 1.0) -> None:
        if self.running:
            logger.warning("Snapshot automático já está em execução")
            return

        def backup_job():
            result = self.create_backup("auto")
            if callback and result:
                callback(result)

        self._scheduler.clear()
        self._scheduler.every(interval_hours * 3600).seconds.do(backup_job)
        self._stop.clear()

        def run_scheduler():
            while not self._stop.wait(poll_seconds):
                self._scheduler.run_pending()

        self._thread = threading.Thread(target=run_scheduler, name=f"backup-{self.node_id}", daemon=True)
        self._thread.start()
        logger.info(f"Snapshot automático iniciado. Intervalo: {interval_hours} horas")

    def stop_auto_backup(self) -> None:
        self._stop.set()
        if self._thread:
            self._thread.join(timeout=5)
            self._thread = None
        self._scheduler.clear()
        logger.info("Snapshot automático parado")
