"""Offline potential-function analyzer for engine traces.

The analyzer replays a traced run epoch by epoch. It keeps the full
per-channel transcripts (which the parties themselves never store), derives
the common-prefix length and the disagreement of every party from them, and
maintains the auxiliary bad-vote and corrupted-computation variables. All
arithmetic is exact (Fraction), including the 0.5 and 0.25 factors.

Trace format (JSON lines): one header object ``{"header": {...}}``, then
(m+1) epoch records per epoch ordered by party, then ``{"footer": {...}}``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable

from robustsim.params import PotentialCoefficients


class MalformedTrace(ValueError):
    pass


class TranscriptBook:
    """Current transcript prefixes of every party, one list per channel end.

    cp[i] is the common prefix length (in epochs) of the leader's channel-i
    transcript and member i's transcript.
    """

    def __init__(self, m: int):
        self.m = m
        self.lead = [[] for _ in range(m)]
        self.mem = [[] for _ in range(m)]
        self.cp = [0] * m
        self._seen: set = set()

    def _grow(self, i: int) -> None:
        a, b = self.lead[i], self.mem[i]
        c = self.cp[i]
        top = min(len(a), len(b))
        while c < top and a[c] == b[c]:
            c += 1
        self.cp[i] = c

    def lists(self, party: int) -> list:
        return self.lead if party == 0 else [self.mem[party - 1]]

    def truncate(self, party: int, P: int) -> None:
        chans = range(self.m) if party == 0 else [party - 1]
        for i in chans:
            lst = self.lead[i] if party == 0 else self.mem[i]
            del lst[P:]
            self.cp[i] = min(self.cp[i], P)

    def append(self, party: int, P_new: int, sigmas: list) -> None:
        """Party computed epoch P_new with per-channel transcripts sigmas."""
        self.truncate(party, P_new - 1)
        chans = range(self.m) if party == 0 else [party - 1]
        for j, i in enumerate(chans):
            lst = self.lead[i] if party == 0 else self.mem[i]
            if len(lst) != P_new - 1:
                raise MalformedTrace(f"party {party} computes epoch {P_new} over a transcript of "
                                     f"{len(lst)} epochs")
            lst.append(sigmas[j])
        for i in chans:
            self._grow(i)

    def after_rollback(self, party: int, P: int) -> None:
        self.truncate(party, P)
        for i in (range(self.m) if party == 0 else [party - 1]):
            self._grow(i)

    def common_prefix(self) -> int:
        return min(self.cp) if self.cp else 0

    def prefix_equal(self, i: int, la: int, lb: int) -> bool:
        """Leader's channel-i prefix of la epochs equals member i's prefix of lb epochs."""
        if la < 0 or lb < 0 or la != lb:
            return False
        return la <= self.cp[i] or la == 0

    def apply_epoch(self, recs: list) -> None:
        for r in recs:
            if r["computed"]:
                self.append(r["party"], r["P_start"] + 1, r["sigma"])
        for r in recs:
            if r["transition"] in ("mp1", "mp2"):
                self.after_rollback(r["party"], r["P"])

    def update_from_records(self, recs: list, hd_values: list) -> int:
        """Apply one epoch and count new long-hash collisions among stored entries."""
        self.apply_epoch(recs)
        new = 0
        for i, common in enumerate(hd_values):
            for p, (ha, hb) in common.items():
                if ha == hb and self.cp[i] < p:
                    key = (i, p, ha)
                    if key not in self._seen:
                        self._seen.add(key)
                        new += 1
        return new


@dataclass
class EpochRow:
    epoch: int
    L: int
    D_AB: int
    k_AB: int
    E_AB: int
    alpha_AB: Fraction
    beta_AB: Fraction
    gamma: Fraction
    equation: int
    phi: Fraction
    delta_phi: Fraction
    consistent: bool
    dirty: bool
    violation: str = ""


@dataclass
class AnalysisReport:
    rows: list = field(default_factory=list)
    violations: list = field(default_factory=list)
    phi_final: Fraction = Fraction(0)
    L_final: int = 0
    success: bool | None = None

    @property
    def ok(self) -> bool:
        return not self.violations

    def ledger_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "L", "D_AB", "k_AB", "E_AB", "alpha_AB", "beta_AB", "gamma", "equation",
                    "phi", "delta_phi", "consistent", "dirty", "violation"])
        for r in self.rows:
            w.writerow([r.epoch, r.L, r.D_AB, r.k_AB, r.E_AB, r.alpha_AB, r.beta_AB, r.gamma,
                        r.equation, r.phi, r.delta_phi, int(r.consistent), int(r.dirty), r.violation])
        return buf.getvalue()


class PotentialAnalyzer:
    def __init__(self, m: int, R: int, n: int, r: int, coeffs: PotentialCoefficients | None = None):
        self.m, self.R, self.n, self.r = m, R, n, r
        self.C = coeffs or PotentialCoefficients.for_m(m)
        np_ = m + 1
        self.P = [0] * np_
        self.k = [0] * np_
        self.E = [0] * np_
        self.alpha = [Fraction(0)] * np_
        self.beta = [Fraction(0)] * np_
        self.gamma = Fraction(0)
        self.book = TranscriptBook(m)
        self.epoch = 0
        self.report = AnalysisReport()

    # --- the potential ------------------------------------------------------------

    def L(self) -> int:
        return self.book.common_prefix()

    def D(self) -> list:
        L = self.L()
        return [p - L for p in self.P]

    def equation(self) -> int:
        return 1 if len(set(self.k)) == 1 else 2

    def phi(self) -> Fraction:
        return phi_value(self.L(), sum(self.D()), sum(self.k), sum(self.E), sum(self.alpha),
                         sum(self.beta), self.gamma, self.C, self.equation() == 1)

    # --- epoch replay -------------------------------------------------------------------

    def _bad_prefix(self, j: int, length: int, recs: list) -> bool:
        """True if party j's prefix of `length` epochs matches neither meeting point of its peer."""
        book = self.book
        if j == 0:
            for i in range(self.m):
                peer = recs[i + 1]
                if not (book.prefix_equal(i, length, peer["mp1"]) or book.prefix_equal(i, length, peer["mp2"])):
                    return True
            return False
        i = j - 1
        lead = recs[0]
        return not (book.prefix_equal(i, lead["mp1"], length) or book.prefix_equal(i, lead["mp2"], length))

    def _validate(self, recs: list) -> None:
        if len(recs) != self.m + 1:
            raise MalformedTrace(f"epoch {self.epoch + 1}: expected {self.m + 1} records, got {len(recs)}")
        for j, r in enumerate(recs):
            if r.get("epoch") != self.epoch + 1 or r.get("party") != j:
                raise MalformedTrace(f"record out of order: expected epoch {self.epoch + 1} party {j}, "
                                     f"got epoch {r.get('epoch')} party {r.get('party')}")
            if r["P_start"] != self.P[j]:
                raise MalformedTrace(f"epoch {self.epoch + 1} party {j}: P_start {r['P_start']} "
                                     f"but previous P was {self.P[j]}")
            if r["k_start"] != self.k[j] + 1:
                raise MalformedTrace(f"epoch {self.epoch + 1} party {j}: k_start {r['k_start']} "
                                     f"after k={self.k[j]}")

    def feed(self, recs: list) -> EpochRow:
        self._validate(recs)
        C = self.C
        np_ = self.m + 1
        phi0 = self.phi()
        consistent = sum(self.D()) == 0 and len(set(self.k)) == 1
        dirty = any(r["corrupted_bits_this_epoch"] > 0 or r["hash_fault"] or not r["seed_ok"]
                    or not r["star_ok"] for r in recs)

        # bad votes, judged against the true transcripts at verification time
        trig = any(r["lost_vote"] for r in recs)
        for j, r in enumerate(recs):
            if r["vote"] == "v1" and self._bad_prefix(j, r["mp1"], recs):
                trig = True
            elif r["vote"] == "v2" and self._bad_prefix(j, r["mp2"], recs):
                trig = True
        if trig:
            self.beta = [b + 1 for b in self.beta]

        # computation stage
        D0 = self.D()
        for r in recs:
            if r["computed"]:
                if r["sigma"] is None or len(r["sigma"]) != (self.m if r["party"] == 0 else 1):
                    raise MalformedTrace(f"epoch {self.epoch + 1} party {r['party']}: bad sigma")
                self.book.append(r["party"], r["P_start"] + 1, r["sigma"])
        P_mid = [r["P_start"] + (1 if r["computed"] else 0) for r in recs]
        self.P = P_mid
        D_mid = self.D()
        if any(d1 > d0 for d0, d1 in zip(D0, D_mid)):
            self.gamma += 1

        # transition stage
        k_before = [0 if r["computed"] else r["k_start"] for r in recs]
        ab_before = sum(self.alpha) + sum(self.beta)
        dab_before = sum(D_mid)
        for j, r in enumerate(recs):
            t = r["transition"]
            if t in ("mp1", "mp2"):
                want = r["mp1"] if t == "mp1" else r["mp2"]
                if r["P"] != want:
                    raise MalformedTrace(f"epoch {self.epoch + 1} party {j}: {t} rollback to {r['P']}, "
                                         f"expected {want}")
                self.book.after_rollback(j, r["P"])
            elif r["P"] != P_mid[j]:
                raise MalformedTrace(f"epoch {self.epoch + 1} party {j}: P moved without a rollback")
        self.P = [r["P"] for r in recs]
        dab_after = sum(self.D())
        trans = [r["transition"] for r in recs]
        if all(t in ("mp1", "mp2") for t in trans) and len(set(k_before)) == 1:
            kk = k_before[0]
            if 0 < 2 * dab_before < kk and ab_before < Fraction(kk, 10) and dab_after == 0:
                self.gamma -= Fraction(kk, 4)
        for j, t in enumerate(trans):
            if t == "error":
                self.beta[j] = Fraction(0)
            elif t in ("mp1", "mp2"):
                self.alpha[j] += self.beta[j] / 2
                self.beta[j] = Fraction(0)
                if dab_after == 0:
                    self.alpha[j] = Fraction(0)
        self.k = [r["k"] for r in recs]
        self.E = [r["E"] for r in recs]
        self.epoch += 1

        phi1 = self.phi()
        delta = phi1 - phi0
        msg = ""
        if self.gamma < 0:
            msg = f"gamma < 0 ({self.gamma})"
        elif not dirty and consistent and delta < 1:
            msg = f"clean consistent epoch with delta_phi = {delta} < 1"
        elif not dirty and not consistent and delta < 2:
            msg = f"clean inconsistent epoch with delta_phi = {delta} < 2"
        elif delta < -C.epoch_drop_bound(self.m):
            msg = f"delta_phi = {delta} below -{C.epoch_drop_bound(self.m)}"
        row = EpochRow(epoch=self.epoch, L=self.L(), D_AB=sum(self.D()), k_AB=sum(self.k),
                       E_AB=sum(self.E), alpha_AB=sum(self.alpha), beta_AB=sum(self.beta),
                       gamma=self.gamma, equation=self.equation(), phi=phi1, delta_phi=delta,
                       consistent=consistent, dirty=dirty, violation=msg)
        self.report.rows.append(row)
        if msg:
            self.report.violations.append(f"epoch {self.epoch}: {msg}")
        return row

    def finish(self, success: bool | None) -> AnalysisReport:
        rep = self.report
        rep.phi_final = self.phi()
        rep.L_final = self.L()
        rep.success = success
        if self.epoch != self.R:
            rep.violations.append(f"trace has {self.epoch} epochs, expected R = {self.R}")
        if not (rep.phi_final <= rep.L_final <= self.R):
            rep.violations.append(f"final bound: phi={rep.phi_final}, L={rep.L_final}, R={self.R}")
        if success is not None:
            done = rep.L_final >= -(-self.n // self.r)
            if done != bool(success):
                rep.violations.append(f"L_final={rep.L_final} vs ceil(n/r)={-(-self.n // self.r)} "
                                      f"disagrees with success={success}")
        return rep


def phi_value(L, D_AB, k_AB, E_AB, alpha_AB, beta_AB, gamma, C: PotentialCoefficients,
              k_equal: bool) -> Fraction:
    L, D_AB, k_AB, E_AB = (Fraction(x) for x in (L, D_AB, k_AB, E_AB))
    alpha_AB, beta_AB, gamma = Fraction(alpha_AB), Fraction(beta_AB), Fraction(gamma)
    if k_equal:
        return (L - C.C3 * D_AB + C.C2 * k_AB - C.C5 * E_AB - C.C6 * alpha_AB
                - 2 * C.C6 * beta_AB - C.C7 * gamma)
    return (L - C.C3 * D_AB - Fraction(9, 10) * C.C4 * k_AB + C.C4 * E_AB - C.C6 * alpha_AB
            - C.C6 * beta_AB - C.C7 * gamma)


def trace_lines(header: dict, records: list, footer: dict) -> Iterable[str]:
    yield json.dumps({"header": header}, sort_keys=True)
    for r in records:
        yield json.dumps(r, sort_keys=True)
    yield json.dumps({"footer": footer}, sort_keys=True)


def parse_trace(lines: Iterable[str]) -> tuple[dict, list, dict]:
    header = footer = None
    records = []
    for no, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedTrace(f"line {no}: not JSON ({exc})") from exc
        if "header" in obj:
            if header is not None or records:
                raise MalformedTrace(f"line {no}: unexpected header")
            header = obj["header"]
        elif "footer" in obj:
            footer = obj["footer"]
        else:
            if header is None:
                raise MalformedTrace(f"line {no}: epoch record before header")
            if footer is not None:
                raise MalformedTrace(f"line {no}: record after footer")
            records.append(obj)
    if header is None:
        raise MalformedTrace("missing header")
    if footer is None:
        raise MalformedTrace("missing footer (truncated trace?)")
    return header, records, footer


def analyze(header: dict, records: list, footer: dict | None = None) -> AnalysisReport:
    prm = header["params"]
    m = prm["m"]
    an = PotentialAnalyzer(m, prm["R"], prm["n"], prm["r"], PotentialCoefficients(*prm["coeffs"]))
    if len(records) % (m + 1):
        raise MalformedTrace(f"{len(records)} records is not a multiple of m+1 = {m + 1}")
    for s in range(0, len(records), m + 1):
        an.feed(records[s:s + m + 1])
    return an.finish(None if footer is None else footer.get("success"))


def analyze_result(result) -> AnalysisReport:
    """Analyze a traced SimulationResult directly."""
    return analyze(trace_header(result), result.trace, {"success": result.success})


def trace_header(result) -> dict:
    return {"params": result.params, "config": result.config}


def write_trace(result, path) -> None:
    with open(path, "w") as fh:
        for line in trace_lines(trace_header(result), result.trace,
                                {"success": result.success, "final_P": result.final_P}):
            fh.write(line + "\n")


def analyze_file(path) -> AnalysisReport:
    with open(path) as fh:
        return analyze(*parse_trace(fh))
