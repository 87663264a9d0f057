"""
Everything shared between the closed-loop runner and the estimator and
controller plugins: the assembled problem data (SimContext) and the
per-step record of a run (Trace).
"""
import csv
import io
import math
from typing import Any, Callable, Dict, List, Sequence

import numpy as np

TRACE_SCHEMA_VERSION = 1


def _non_negative(number):
    return max([0, (number or 0)])


class SimContext(object):
    """
    A single object to share with the plugins.

    Estimators work with radii of the squared observer form (cert_obs);
    controllers get norm-form certificates through setup.
    """

    # options get set here explicitly as arguments for easy IDE inspections
    def __init__(self, *, config, model, constraints, bundle, setup=None, mhe_cfg=None, observer=None,
                 observability=None, nlp_opts=None, seed: int = 0, max_workers: int = None):
        self.config = config
        """:type: ofmpc.config.SimConfig """
        self.model = model
        """:type: ofmpc.core.PlantModel """
        self.constraints = constraints
        """ untightened constraints of the plant """
        self.bundle = bundle
        """:type: ofmpc.synthesis.CertificateBundle """
        self.setup = setup
        """:type: ofmpc.tubempc.TubeSetup """
        self.mhe_cfg = mhe_cfg
        self.observer = observer
        """:type: ofmpc.observer.LuenbergerObserver """
        self.observability = observability
        self.nlp_opts = nlp_opts
        self.seed = int(seed)
        self.max_workers = _non_negative(max_workers)

    @property
    def cert_obs(self):
        return self.bundle.cert_obs

    @property
    def cert_ioss(self):
        return self.bundle.cert_ioss

    @property
    def w_bar(self) -> float:
        return self.model.w_bound


class TraceRow(object):
    """ One closed-loop step. Vectors are numpy arrays; unknown scalars are nan. """

    def __init__(self, *, t: int, x, x_hat, u, y, e_bar: float, true_error: float,
                 s0: float = math.nan, e0: float = math.nan, cost: float = math.nan,
                 status: str = '', branch: str = '', margin: float = math.nan,
                 estimator_time: float = 0.0, controller_time: float = 0.0,
                 extra: Dict[str, float] = None):
        self.t = int(t)
        self.x = np.asarray(x, dtype=float)
        self.x_hat = np.asarray(x_hat, dtype=float)
        self.u = np.asarray(u, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.e_bar = float(e_bar)
        """ certified bound on Vo(x_hat, x) """
        self.true_error = float(true_error)
        """ Vo(x_hat, x) """
        self.s0 = float(s0)
        self.e0 = float(e0)
        self.cost = float(cost)
        self.status = status
        self.branch = branch
        self.margin = float(margin)
        """ -max_i g_i(x, u) of the true state """
        self.estimator_time = float(estimator_time)
        self.controller_time = float(controller_time)
        self.extra = dict(extra or {})
        """ further per-step columns, such as an outlier-inflated bound """

    @property
    def bound_holds(self) -> bool:
        """ true_error within e_bar, or within the outlier-inflated bound when one was recorded """
        bound = self.e_bar
        if 'outlier_bound' in self.extra and math.isfinite(self.extra['outlier_bound']):
            bound = max(bound, self.extra['outlier_bound'])
        return self.true_error <= bound * (1.0 + 1e-9) + 1e-12

    def __repr__(self):
        return 'TraceRow(t={}, e_bar={:.4g}, true={:.4g}, status={!r}, branch={!r})'.format(
            self.t, self.e_bar, self.true_error, self.status, self.branch)


class Trace(object):
    """ Rows of one run with the settings that produced it. """

    def __init__(self, *, label: str = '', parameters: Dict[str, Any] = None):
        self.label = label
        self.parameters = dict(parameters or {})
        self.rows = []
        """:type: list[TraceRow] """
        self.events = []
        """ call order of the closed loop, for inspection """

    def __len__(self):
        return len(self.rows)

    def append(self, row: TraceRow):
        self.rows.append(row)

    def log_event(self, t: int, what: str):
        self.events.append((t, what))

    def column(self, name: str) -> np.ndarray:
        """ A scalar column, or a stacked vector column, as an array. """
        if self.rows and name in self.rows[0].extra:
            return np.array([row.extra.get(name, math.nan) for row in self.rows])
        return np.array([getattr(row, name) for row in self.rows])

    @property
    def bounds_hold(self) -> bool:
        return all(row.bound_holds for row in self.rows)

    def header(self) -> List[str]:
        if not self.rows:
            return []
        first = self.rows[0]
        names = ['t']
        for name in ('x', 'x_hat', 'u', 'y'):
            names.extend('{}{}'.format(name, i + 1) for i in range(getattr(first, name).size))
        names += ['e_bar', 'true_error', 's0', 'e0', 'cost', 'status', 'branch', 'margin',
                  'estimator_time', 'controller_time']
        names += sorted(first.extra)
        return names

    def _values(self, row: TraceRow, timing: bool) -> list:
        values = [row.t]
        for name in ('x', 'x_hat', 'u', 'y'):
            values.extend(_format(v) for v in getattr(row, name))
        values += [_format(row.e_bar), _format(row.true_error), _format(row.s0), _format(row.e0),
                   _format(row.cost), row.status, row.branch, _format(row.margin)]
        values += [_format(row.estimator_time), _format(row.controller_time)] if timing else ['', '']
        values += [_format(row.extra.get(k, math.nan)) for k in sorted(self.rows[0].extra)]
        return values

    def to_csv(self, path_or_stream=None, timing: bool = True) -> str:
        """
        Write the trace as CSV with a '# schema' comment line.

        Wall times are the only non-deterministic columns; timing=False
        leaves them empty so identical runs give identical files.
        """
        stream = io.StringIO()
        stream.write('# ofmpc trace schema {} {}\n'.format(TRACE_SCHEMA_VERSION, self.label))
        writer = csv.writer(stream, lineterminator='\n')
        writer.writerow(self.header())
        for row in self.rows:
            writer.writerow(self._values(row, timing))
        text = stream.getvalue()
        if isinstance(path_or_stream, str):
            with open(path_or_stream, 'w') as f:
                f.write(text)
        elif path_or_stream is not None:
            path_or_stream.write(text)
        return text


def _format(value: float) -> str:
    return repr(float(value))


def read_csv(path: str) -> Dict[str, np.ndarray]:
    """ Columns of a trace CSV; numeric columns as float arrays. """
    with open(path) as f:
        lines = [line for line in f if not line.startswith('#')]
    reader = csv.DictReader(lines)
    data = {}
    for row in reader:
        for key, value in row.items():
            data.setdefault(key, []).append(value)
    result = {}
    for key, values in data.items():
        try:
            result[key] = np.array([float(v) if v != '' else math.nan for v in values])
        except ValueError:
            result[key] = np.array(values)
    return result


def merge_rows(summaries: Sequence[Dict[str, Any]], key: Callable[[Dict[str, Any]], Any] = None) -> List[dict]:
    """ Summary dicts sorted by key (seed by default). """
    return sorted(summaries, key=key or (lambda s: s.get('seed', 0)))


def write_summaries(summaries: Sequence[Dict[str, Any]], path_or_stream) -> None:
    """ One CSV row per summary dict; columns are the union of the keys, sorted. """
    columns = sorted(set().union(*(s.keys() for s in summaries))) if summaries else []
    stream = open(path_or_stream, 'w', newline='') if isinstance(path_or_stream, str) else path_or_stream
    try:
        writer = csv.DictWriter(stream, fieldnames=columns, lineterminator='\n')
        writer.writeheader()
        for summary in summaries:
            writer.writerow({k: _cell(v) for k, v in summary.items()})
    finally:
        if isinstance(path_or_stream, str):
            stream.close()


def _cell(value):
    if isinstance(value, float):
        return repr(value)
    return value
