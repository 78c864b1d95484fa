# display.py
"""Human-readable reports printed by the command line. Data goes to CSV; these are for people."""
import pandas as pd

from scaling import CONTINUOUS, DISCRETE, DROPPED

# --- Formatting ---
MISSING = "-"


def format_value(value, digits=6):
    if value is None or (isinstance(value, float) and value != value):
        return MISSING
    if isinstance(value, (int, float)):
        return f"{value:.{digits}g}"
    return str(value)


def format_estimate(value, stderr):
    if stderr is None or stderr == 0:
        return format_value(value)
    return f"{format_value(value)} ± {format_value(stderr, 3)}"


def format_exponent(value):
    return MISSING if value is None else str(value)


def _table(df):
    if df.empty:
        return "(none)"
    return df.to_string(index=False)


# --- validate ---

def validation_report(network, name=None, scaling=None, timescales=None):
    name = name or "model"
    lines = [f"{name}: {network.n_reactions} reactions, {network.n_species} species"]
    lines.append(f"  parameters: {', '.join(network.param_names) or MISSING}")
    lines.append(f"  observables: {', '.join(network.observables) or MISSING}")
    if scaling is not None:
        lines.append(f"  scaling: N0={format_value(scaling.N0)}, gamma={format_exponent(scaling.gamma) if scaling.gamma is not None else 'auto'}")
    if timescales is not None:
        lines.append(f"  observation timescale r={timescales.r}")
        if timescales.qsa_needed:
            lines.append(f"  fast discrete reactions (QSA needed): {', '.join(timescales.qsa_needed)}")
    lines.append("OK")
    return "\n".join(lines)


def violations_report(error):
    lines = [f"invalid: {error}"]
    for violation in getattr(error, "violations", [])[1:]:
        lines.append(f"  - {violation}")
    return "\n".join(lines)


# --- reduce ---

def timescale_table(report, network) -> pd.DataFrame:
    zeta_hat = report.zeta_hat
    rows = []
    for k, name in enumerate(network.reaction_names):
        change = ", ".join(
            f"{s}{int(zeta_hat[i, k]):+d}" for i, s in enumerate(network.species_names) if zeta_hat[i, k]
        )
        rows.append({
            "reaction": name,
            "rho": format_exponent(report.rho[k]),
            "r+rho": format_exponent(report.observation + report.rho[k]),
            "class": report.classification[k],
            "zeta_hat": change or "0",
        })
    return pd.DataFrame(rows)


def reduction_report(reduced, network):
    """Timescales and classification against the original ``network``."""
    report = reduced.report
    lines = []
    if report is not None:
        species = pd.DataFrame({
            "species": network.species_names,
            "gamma_i": [format_exponent(g) for g in report.gamma_i],
            "kind": [CONTINUOUS if s in reduced.continuous_species else DISCRETE for s in network.species_names],
        })
        lines.append(f"observation timescale r={report.r}, gamma={report.observation}")
        lines.append(_table(species))
        lines.append("")
        lines.append(_table(timescale_table(report, network)))
        if report.dropped:
            lines.append(f"dropped ({DROPPED}): {', '.join(report.dropped)}")
        if report.inert:
            lines.append(f"inert after truncation: {', '.join(report.inert)}")
    lines.append(f"R_c = {{{', '.join(reduced.continuous_reactions)}}}")
    lines.append(f"R_d = {{{', '.join(reduced.discrete_reactions)}}}")
    return "\n".join(lines)


# --- simulate ---

def summary_report(df, species_names, rows=10):
    cols = ["t"] + [c for name in species_names for c in (f"{name}_mean", f"{name}_stderr")]
    shown = df[cols]
    if len(shown) > rows:
        shown = pd.concat([shown.head(rows // 2), shown.tail(rows - rows // 2)])
    return shown.to_string(index=False, float_format=lambda v: format_value(v))


def histogram_report(support, counts, species):
    df = pd.DataFrame({species: support, "count": counts})
    return _table(df)


# --- sens / compare ---

def sensitivity_report(estimates):
    rows = []
    for e in estimates:
        row = {"parameter": e.parameter, "method": e.method, "estimate": format_estimate(e.value, e.stderr), "n": e.n}
        if e.parts:
            row["continuous"] = format_estimate(e.parts["continuous"].value, e.parts["continuous"].stderr)
            row["discrete"] = format_estimate(e.parts["discrete"].value, e.parts["discrete"].stderr)
        rows.append(row)
    return _table(pd.DataFrame(rows).fillna(MISSING))


def comparison_report(table, threshold):
    shown = table.copy()
    for col in ("estimate_a", "estimate_b", "stderr_a", "stderr_b", "z"):
        shown[col] = shown[col].map(format_value)
    verdict = "agree" if (table["z"] <= threshold).all() else "DISAGREE"
    return f"{_table(shown)}\nmax z = {format_value(table['z'].max(), 4)} (threshold {threshold}): {verdict}"


# --- oracle-cme ---

def cme_report(result, species_names, expectation=None, observable=None):
    mean = result.mean()
    lines = [f"{result.space.size} states, boundary mass {format_value(result.boundary_mass, 3)}, leakage {result.leakage:g}"]
    lines.extend(f"  E[{name}] = {format_value(m, 10)}" for name, m in zip(species_names, mean))
    if observable is not None:
        lines.append(f"  E[{observable}] = {format_value(expectation, 10)}")
    return "\n".join(lines)
