"""
Run Ledger - SQLite history of every report the CLI produces
Stores reports per (kind, checkpoint), detects significant changes between runs
"""

import json
import logging
import os
import sqlite3
from datetime import datetime
from typing import Dict, List, Optional, Tuple

logger = logging.getLogger(__name__)

# report kind -> {flattened field: (threshold, direction)}; direction is the bad move
WATCHED_FIELDS = {
    'train': {'final_nf_loss': (0.05, 'rise'), 'final_align_loss': (0.05, 'rise')},
    'classify': {'single_step_accuracy': (0.05, 'drop'), 'bruteforce_accuracy': (0.05, 'drop'),
                 'agreement': (0.05, 'drop')},
    'bench': {'ratios.reverse_over_naive': (1.0, 'drop'), 'steps_per_sec.reverse': (0.5, 'drop')},
    'roundtrip-check': {'checks.invertibility.value': (1e-7, 'rise'),
                        'checks.cached_inverse.value': (1e-11, 'rise')},
}


def flatten_report(report: Dict, prefix: str = '') -> Dict[str, float]:
    """Numeric leaves of a nested report as dotted keys"""
    flat = {}
    for key, value in report.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten_report(value, path + '.'))
        elif isinstance(value, (int, float)) and not isinstance(value, bool) and value is not None:
            flat[path] = float(value)
    return flat


class RunLedger:
    """
    Ledger of run reports

    Capabilities:
    1. Record - store every train / sample / classify / bench / roundtrip report
    2. Compare - flag watched fields that moved past their threshold
    3. Summarise - history and recent changes for the dashboard
    """

    def __init__(self, db_path: str = 'data/ledger.db'):
        self.db_path = db_path
        os.makedirs(os.path.dirname(db_path) or '.', exist_ok=True)
        self._init_database()

    def _connect(self) -> sqlite3.Connection:
        return sqlite3.connect(self.db_path)

    def _init_database(self):
        conn = self._connect()
        cursor = conn.cursor()

        cursor.execute('''
            CREATE TABLE IF NOT EXISTS reports (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                kind TEXT NOT NULL,
                checkpoint TEXT NOT NULL,
                recorded_at TEXT NOT NULL,
                success BOOLEAN,
                report TEXT NOT NULL
            )
        ''')

        cursor.execute('''
            CREATE TABLE IF NOT EXISTS change_log (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                kind TEXT NOT NULL,
                checkpoint TEXT NOT NULL,
                change_date TEXT NOT NULL,
                field TEXT NOT NULL,
                old_value REAL,
                new_value REAL,
                magnitude REAL,
                significance TEXT
            )
        ''')

        conn.commit()
        conn.close()

    def _previous(self, cursor, kind: str, checkpoint: str) -> Optional[Dict]:
        cursor.execute('''
            SELECT report FROM reports
            WHERE kind = ? AND checkpoint = ?
            ORDER BY id DESC
            LIMIT 1
        ''', (kind, checkpoint))
        row = cursor.fetchone()
        return json.loads(row[0]) if row else None

    def detect_changes(self, kind: str, previous: Optional[Dict], current: Dict) -> List[Tuple[str, float, float, float, str]]:
        """(field, old, new, magnitude, significance) for watched fields that moved the bad way"""
        if not previous:
            return []
        old_flat, new_flat = flatten_report(previous), flatten_report(current)
        changes = []
        for field, (threshold, direction) in WATCHED_FIELDS.get(kind, {}).items():
            old, new = old_flat.get(field), new_flat.get(field)
            if old is None or new is None:
                continue
            moved = new - old if direction == 'rise' else old - new
            if moved >= threshold:
                significance = 'HIGH' if moved >= 3 * threshold else 'MEDIUM'
                changes.append((field, old, new, abs(new - old), significance))
        return changes

    def record(self, kind: str, checkpoint: str, report: Dict) -> List[Dict]:
        """Store a report and return the significant changes against the previous one"""
        checkpoint = os.path.abspath(str(checkpoint))
        now = datetime.now().isoformat(timespec='seconds')
        conn = self._connect()
        cursor = conn.cursor()

        previous = self._previous(cursor, kind, checkpoint)
        cursor.execute('''
            INSERT INTO reports (kind, checkpoint, recorded_at, success, report)
            VALUES (?, ?, ?, ?, ?)
        ''', (kind, checkpoint, now, bool(report.get('success')), json.dumps(report, default=str)))

        changes = self.detect_changes(kind, previous, report)
        for field, old, new, magnitude, significance in changes:
            cursor.execute('''
                INSERT INTO change_log
                (kind, checkpoint, change_date, field, old_value, new_value, magnitude, significance)
                VALUES (?, ?, ?, ?, ?, ?, ?, ?)
            ''', (kind, checkpoint, now, field, old, new, magnitude, significance))

        conn.commit()
        conn.close()

        for field, old, new, _, significance in changes:
            logger.warning(f"⚠️ {kind} {field}: {old:.4g} -> {new:.4g} ({significance})")
        return [{'field': f, 'from': o, 'to': n, 'magnitude': m, 'significance': s}
                for f, o, n, m, s in changes]

    def history(self, kind: Optional[str] = None, checkpoint: Optional[str] = None, limit: int = 200) -> List[Dict]:
        query = 'SELECT id, kind, checkpoint, recorded_at, success, report FROM reports WHERE 1 = 1'
        args: list = []
        if kind:
            query += ' AND kind = ?'
            args.append(kind)
        if checkpoint:
            query += ' AND checkpoint = ?'
            args.append(os.path.abspath(str(checkpoint)))
        query += ' ORDER BY id DESC LIMIT ?'
        args.append(limit)

        conn = self._connect()
        rows = conn.execute(query, args).fetchall()
        conn.close()
        return [{'id': r[0], 'kind': r[1], 'checkpoint': r[2], 'recorded_at': r[3],
                 'success': bool(r[4]), 'report': json.loads(r[5])} for r in rows]

    def recent_changes(self, checkpoint: Optional[str] = None, limit: int = 20) -> List[Dict]:
        query = '''
            SELECT change_date, kind, checkpoint, field, old_value, new_value, magnitude, significance
            FROM change_log
        '''
        args: list = []
        if checkpoint:
            query += ' WHERE checkpoint = ?'
            args.append(os.path.abspath(str(checkpoint)))
        query += ' ORDER BY id DESC LIMIT ?'
        args.append(limit)

        conn = self._connect()
        rows = conn.execute(query, args).fetchall()
        conn.close()
        return [{'date': r[0], 'kind': r[1], 'checkpoint': r[2], 'field': r[3], 'from': r[4],
                 'to': r[5], 'magnitude': r[6], 'significance': r[7]} for r in rows]

    def get_stats(self) -> Dict:
        conn = self._connect()
        cursor = conn.cursor()
        cursor.execute('SELECT COUNT(*), SUM(CASE WHEN success THEN 1 ELSE 0 END) FROM reports')
        total, passed = cursor.fetchone()
        cursor.execute("SELECT COUNT(*) FROM change_log WHERE significance = 'HIGH'")
        high = cursor.fetchone()[0]
        cursor.execute('SELECT COUNT(DISTINCT checkpoint) FROM reports')
        checkpoints = cursor.fetchone()[0]
        conn.close()
        return {
            'total_reports': total or 0,
            'successful_reports': passed or 0,
            'high_changes': high,
            'checkpoints': checkpoints,
            'success_rate': round((passed or 0) / total * 100, 1) if total else 0.0,
        }
