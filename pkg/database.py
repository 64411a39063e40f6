"""
Database module for the experiment run ledger.
Uses SQLite for persistence.
"""

import sqlite3
from datetime import datetime
from typing import List, Optional, Dict, Any, Union
from pathlib import Path
from dataclasses import dataclass

from config import config
from logger import log_info


@dataclass
class RunRecord:
    """One theorem verdict (or distance-only row) of an experiment run."""
    id: Optional[int]
    timestamp: datetime
    command: str
    config_hash: str
    theorem: Optional[str]
    ks: Optional[float]
    dkw_radius: Optional[float]
    bound: Optional[float]
    bound_se: Optional[float]
    verdict: Optional[str]      # 'PASS', 'FAIL', 'C-FREE' or None
    report_path: Optional[str]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'id': self.id,
            'timestamp': self.timestamp.isoformat(),
            'command': self.command,
            'config_hash': self.config_hash,
            'theorem': self.theorem,
            'ks': self.ks,
            'dkw_radius': self.dkw_radius,
            'bound': self.bound,
            'bound_se': self.bound_se,
            'verdict': self.verdict,
            'report_path': self.report_path,
        }


@dataclass
class RateFitRecord:
    """A fitted convergence slope over a size ladder."""
    id: Optional[int]
    timestamp: datetime
    config_hash: str
    model_kind: str
    sizes: str
    slope: float
    slope_low: float
    slope_high: float
    intercept: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            'id': self.id,
            'timestamp': self.timestamp.isoformat(),
            'config_hash': self.config_hash,
            'model_kind': self.model_kind,
            'sizes': self.sizes,
            'slope': self.slope,
            'slope_low': self.slope_low,
            'slope_high': self.slope_high,
            'intercept': self.intercept,
        }


class Database:
    """SQLite database manager for run history."""

    def __init__(self, db_path: Union[str, Path, None] = None):
        self.db_path = Path(db_path or config.db_path)
        if str(self.db_path) != ":memory:":
            self.db_path.parent.mkdir(parents=True, exist_ok=True)
        self._init_db()

    def _get_connection(self) -> sqlite3.Connection:
        """Get database connection."""
        conn = sqlite3.connect(str(self.db_path))
        conn.row_factory = sqlite3.Row
        return conn

    def _init_db(self):
        """Initialize database tables."""
        conn = self._get_connection()
        cursor = conn.cursor()

        cursor.execute('''
            CREATE TABLE IF NOT EXISTS runs (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                timestamp TEXT NOT NULL,
                command TEXT NOT NULL,
                config_hash TEXT NOT NULL,
                theorem TEXT,
                ks REAL,
                dkw_radius REAL,
                bound REAL,
                bound_se REAL,
                verdict TEXT,
                report_path TEXT
            )
        ''')

        cursor.execute('''
            CREATE TABLE IF NOT EXISTS rate_fits (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                timestamp TEXT NOT NULL,
                config_hash TEXT NOT NULL,
                model_kind TEXT NOT NULL,
                sizes TEXT NOT NULL,
                slope REAL NOT NULL,
                slope_low REAL NOT NULL,
                slope_high REAL NOT NULL,
                intercept REAL NOT NULL
            )
        ''')

        conn.commit()
        conn.close()
        log_info(f"Database initialized at {self.db_path}")

    def insert_run(self, record: RunRecord) -> int:
        """Insert a run row and return its ID."""
        conn = self._get_connection()
        cursor = conn.cursor()
        cursor.execute('''
            INSERT INTO runs (timestamp, command, config_hash, theorem, ks, dkw_radius,
             bound, bound_se, verdict, report_path)
            VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
        ''', (
            record.timestamp.isoformat(), record.command, record.config_hash, record.theorem,
            record.ks, record.dkw_radius, record.bound, record.bound_se,
            record.verdict, record.report_path,
        ))
        run_id = cursor.lastrowid
        conn.commit()
        conn.close()
        return run_id

    def insert_rate_fit(self, record: RateFitRecord) -> int:
        conn = self._get_connection()
        cursor = conn.cursor()
        cursor.execute('''
            INSERT INTO rate_fits (timestamp, config_hash, model_kind, sizes, slope,
             slope_low, slope_high, intercept)
            VALUES (?, ?, ?, ?, ?, ?, ?, ?)
        ''', (
            record.timestamp.isoformat(), record.config_hash, record.model_kind, record.sizes,
            record.slope, record.slope_low, record.slope_high, record.intercept,
        ))
        fit_id = cursor.lastrowid
        conn.commit()
        conn.close()
        return fit_id

    def get_recent_runs(self, limit: int = 20) -> List[RunRecord]:
        """Get the latest run rows, newest first."""
        conn = self._get_connection()
        cursor = conn.cursor()
        cursor.execute('SELECT * FROM runs ORDER BY id DESC LIMIT ?', (limit,))
        rows = cursor.fetchall()
        conn.close()
        return [self._row_to_run(row) for row in rows]

    def get_runs_by_hash(self, config_hash: str) -> List[RunRecord]:
        conn = self._get_connection()
        cursor = conn.cursor()
        cursor.execute('SELECT * FROM runs WHERE config_hash = ? ORDER BY id', (config_hash,))
        rows = cursor.fetchall()
        conn.close()
        return [self._row_to_run(row) for row in rows]

    def get_rate_fits(self, limit: int = 20) -> List[RateFitRecord]:
        conn = self._get_connection()
        cursor = conn.cursor()
        cursor.execute('SELECT * FROM rate_fits ORDER BY id DESC LIMIT ?', (limit,))
        rows = cursor.fetchall()
        conn.close()
        return [
            RateFitRecord(
                id=row['id'],
                timestamp=datetime.fromisoformat(row['timestamp']),
                config_hash=row['config_hash'],
                model_kind=row['model_kind'],
                sizes=row['sizes'],
                slope=row['slope'],
                slope_low=row['slope_low'],
                slope_high=row['slope_high'],
                intercept=row['intercept'],
            )
            for row in rows
        ]

    def _row_to_run(self, row: sqlite3.Row) -> RunRecord:
        """Convert database row to RunRecord object."""
        return RunRecord(
            id=row['id'],
            timestamp=datetime.fromisoformat(row['timestamp']),
            command=row['command'],
            config_hash=row['config_hash'],
            theorem=row['theorem'],
            ks=row['ks'],
            dkw_radius=row['dkw_radius'],
            bound=row['bound'],
            bound_se=row['bound_se'],
            verdict=row['verdict'],
            report_path=row['report_path'],
        )


# Global database instance, created on first use
_db: Optional[Database] = None


def get_db() -> Database:
    global _db
    if _db is None:
        _db = Database()
    return _db
