//! File formats. Every file starts with a `# config_hash=<hex> seed=<n>` line;
//! CSV readers skip `#` lines. Floats are written with 17 significant digits
//! so values survive a round trip bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::koopman::{KoopmanModel, Normalization, VelocityPredictor};
use crate::lift::MlpParams;
use crate::mpc::ClosedLoopTrace;
use crate::train::{BaselineHistory, MethodMetrics, MlpBaselineModel, RunHistory, TruthPredictor};
use crate::vessel::{ControlInput, Trajectory, VesselParams, VesselState};

/// Where an output came from.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Provenance {
            config_hash: config_hash.into(),
            seed,
        }
    }

    fn comment(&self, extra: &str) -> String {
        let mut s = format!("# config_hash={} seed={}", self.config_hash, self.seed);
        if !extra.is_empty() {
            s.push(' ');
            s.push_str(extra);
        }
        s.push('\n');
        s
    }
}

/// Scientific notation with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_err(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        reason: reason.into(),
    }
}

fn parse_f64(path: &Path, line: usize, s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| parse_err(path, line, format!("not a number: {s:?}")))
}

/// `key=value` pairs of a `#` comment line.
fn comment_fields(line: &str) -> Vec<(String, String)> {
    line.trim_start_matches('#')
        .split_whitespace()
        .filter_map(|kv| kv.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect()
}

fn read_provenance(text: &str) -> Provenance {
    let mut prov = Provenance::default();
    if let Some(first) = text.lines().next().filter(|l| l.starts_with('#')) {
        for (k, v) in comment_fields(first) {
            match k.as_str() {
                "config_hash" => prov.config_hash = v,
                "seed" => prov.seed = v.parse().unwrap_or(0),
                _ => {}
            }
        }
    }
    prov
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Header and rows of a CSV body with `#` lines skipped; each row keeps its 1-based line number.
fn csv_rows(path: &Path, text: &str, expected_header: Option<&str>) -> Result<(Vec<String>, Vec<(usize, Vec<String>)>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let hline = rdr.headers()?.position().map_or(1, |p| p.line() as usize);
    if header.is_empty() {
        return Err(parse_err(path, 1, "missing header"));
    }
    if let Some(exp) = expected_header {
        if header.join(",") != exp {
            return Err(parse_err(path, hline, format!("expected header {exp:?}, found {:?}", header.join(","))));
        }
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok((header, rows))
}

pub const TRAJECTORY_HEADER: &str = "t,px,py,phi,vx,vy,dphi,u_left,u_right";

pub fn write_trajectory_csv(path: &Path, traj: &Trajectory, prov: &Provenance) -> Result<()> {
    let mut out = prov.comment(&format!("dt={}", fmt_f64(traj.dt)));
    out.push_str(TRAJECTORY_HEADER);
    out.push('\n');
    for (t, s) in traj.states.iter().enumerate() {
        let x = s.to_array();
        let _ = write!(out, "{t}");
        for v in x {
            let _ = write!(out, ",{}", fmt_f64(v));
        }
        match traj.inputs.get(t) {
            Some(u) => {
                let _ = writeln!(out, ",{},{}", fmt_f64(u.0[0]), fmt_f64(u.0[1]));
            }
            None => out.push_str(",,\n"),
        }
    }
    write_text(path, &out)
}

pub fn read_trajectory_csv(path: &Path) -> Result<Trajectory> {
    let text = fs::read_to_string(path)?;
    let prov = read_provenance(&text);
    let dt = text
        .lines()
        .next()
        .filter(|l| l.starts_with('#'))
        .and_then(|l| comment_fields(l).into_iter().find(|(k, _)| k == "dt"))
        .ok_or_else(|| parse_err(path, 1, "missing dt in the header comment"))
        .and_then(|(_, v)| parse_f64(path, 1, &v))?;
    let (_, rows) = csv_rows(path, &text, Some(TRAJECTORY_HEADER))?;
    let mut states = Vec::with_capacity(rows.len());
    let mut inputs = Vec::with_capacity(rows.len());
    let n_rows = rows.len();
    for (k, (line, row)) in rows.into_iter().enumerate() {
        if row.len() != 9 {
            return Err(parse_err(path, line, format!("expected 9 fields, found {}", row.len())));
        }
        let t: usize = row[0].parse().map_err(|_| parse_err(path, line, "bad time index"))?;
        if t != k {
            return Err(parse_err(path, line, format!("time index {t}, expected {k}")));
        }
        let mut x = [0.0; 6];
        for i in 0..6 {
            x[i] = parse_f64(path, line, &row[i + 1])?;
        }
        states.push(VesselState::from_array(x));
        let last = k + 1 == n_rows;
        match (row[7].is_empty(), row[8].is_empty(), last) {
            (true, true, true) => {}
            (false, false, false) => {
                let u = ControlInput([parse_f64(path, line, &row[7])?, parse_f64(path, line, &row[8])?]);
                if !u.in_box() {
                    return Err(parse_err(path, line, "input outside [-1, 1]"));
                }
                inputs.push(u);
            }
            _ => return Err(parse_err(path, line, "only the final row has empty inputs")),
        }
    }
    if states.len() < 2 {
        return Err(parse_err(path, 1, "trajectory needs at least two states"));
    }
    Ok(Trajectory {
        dt,
        states,
        inputs,
        seed: prov.seed,
    })
}

/// A persisted predictor.
#[derive(Debug, Clone, PartialEq)]
pub enum SavedModel {
    Koopman(KoopmanModel),
    Mlp(MlpBaselineModel),
    /// The simulator itself, for checking the evaluation pipeline.
    Truth(TruthPredictor),
}

impl SavedModel {
    pub fn kind(&self) -> &'static str {
        match self {
            SavedModel::Koopman(_) => "koopman",
            SavedModel::Mlp(_) => "mlp",
            SavedModel::Truth(_) => "truth",
        }
    }

    pub fn predictor(&self) -> &dyn VelocityPredictor {
        match self {
            SavedModel::Koopman(m) => m,
            SavedModel::Mlp(m) => m,
            SavedModel::Truth(m) => m,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub provenance: Provenance,
    pub agent: Option<usize>,
    pub model: SavedModel,
}

fn push_array(out: &mut String, name: &str, rows: usize, cols: usize, row_major: impl Iterator<Item = f64>) {
    let _ = writeln!(out, "array {name} {rows} {cols}");
    let vals: Vec<f64> = row_major.collect();
    for r in 0..rows {
        let line: Vec<String> = vals[r * cols..(r + 1) * cols].iter().map(|v| fmt_f64(*v)).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
}

fn push_matrix(out: &mut String, name: &str, m: &DMatrix<f64>) {
    let (r, c) = m.shape();
    push_array(out, name, r, c, (0..r).flat_map(|i| (0..c).map(move |j| m[(i, j)])));
}

fn push_mlp(out: &mut String, p: &MlpParams) {
    let (n, h, o) = p.dims();
    push_array(out, "W1", h, n, p.w1().iter().copied());
    push_array(out, "b1", h, 1, p.b1().iter().copied());
    push_array(out, "W2", o, h, p.w2().iter().copied());
    push_array(out, "b2", o, 1, p.b2().iter().copied());
}

fn push_normalization(out: &mut String, n: &Option<Normalization>) {
    match n {
        None => out.push_str("normalization none\n"),
        Some(n) => {
            let v: Vec<String> = n.mean.iter().chain(&n.std).map(|x| fmt_f64(*x)).collect();
            let _ = writeln!(out, "normalization {}", v.join(" "));
        }
    }
}

pub fn checkpoint_to_string(ck: &Checkpoint) -> String {
    let mut out = ck.provenance.comment("");
    let _ = writeln!(out, "kind {}", ck.model.kind());
    if let Some(a) = ck.agent {
        let _ = writeln!(out, "agent {a}");
    }
    match &ck.model {
        SavedModel::Koopman(m) => {
            let _ = writeln!(
                out,
                "dims n={} m={} r={} hidden={}",
                m.state_dim(),
                m.input_dim(),
                m.lift_dim(),
                m.theta.hidden()
            );
            push_normalization(&mut out, &m.normalization);
            push_matrix(&mut out, "A", &m.a);
            push_matrix(&mut out, "B", &m.b);
            push_matrix(&mut out, "C", &m.c);
            push_mlp(&mut out, &m.theta);
        }
        SavedModel::Mlp(m) => {
            let (n, h, o) = m.theta.dims();
            let _ = writeln!(out, "dims in={n} hidden={h} out={o}");
            push_normalization(&mut out, &m.normalization);
            push_mlp(&mut out, &m.theta);
        }
        SavedModel::Truth(t) => {
            let p = &t.params;
            let _ = writeln!(out, "dt {}", fmt_f64(t.dt));
            let scalars = [p.mass, p.yaw_inertia, p.thruster_offset, p.max_thrust];
            push_array(&mut out, "scalars", 1, 4, scalars.into_iter());
            push_array(&mut out, "added_mass", 1, 3, p.added_mass.into_iter());
            push_array(&mut out, "linear_damping", 1, 3, p.linear_damping.into_iter());
            push_array(&mut out, "quadratic_damping", 1, 3, p.quadratic_damping.into_iter());
        }
    }
    out
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_text(path, &checkpoint_to_string(ck))
}

struct CheckpointParser<'a> {
    path: &'a Path,
    lines: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> CheckpointParser<'a> {
    fn next_line(&mut self) -> Result<(usize, &'a str)> {
        let last = self.lines.last().map_or(1, |l| l.0);
        let l = *self
            .lines
            .get(self.pos)
            .ok_or_else(|| parse_err(self.path, last, "unexpected end of file"))?;
        self.pos += 1;
        Ok(l)
    }

    fn keyword(&mut self, key: &str) -> Result<(usize, Vec<&'a str>)> {
        let (n, l) = self.next_line()?;
        let mut parts = l.split_whitespace();
        if parts.next() != Some(key) {
            return Err(parse_err(self.path, n, format!("expected `{key}`")));
        }
        Ok((n, parts.collect()))
    }

    fn peek_keyword(&self, key: &str) -> bool {
        self.lines
            .get(self.pos)
            .is_some_and(|(_, l)| l.split_whitespace().next() == Some(key))
    }

    fn array(&mut self, name: &str, rows: usize, cols: usize) -> Result<Vec<f64>> {
        let (n, parts) = self.keyword("array")?;
        let dims: Vec<usize> = parts[1..].iter().filter_map(|s| s.parse().ok()).collect();
        if parts.first() != Some(&name) || dims != [rows, cols] {
            return Err(parse_err(self.path, n, format!("expected array {name} {rows} {cols}")));
        }
        let mut vals = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (ln, l) = self.next_line()?;
            let row: Vec<f64> = l.split_whitespace().map(|s| parse_f64(self.path, ln, s)).collect::<Result<_>>()?;
            if row.len() != cols {
                return Err(parse_err(self.path, ln, format!("expected {cols} values, found {}", row.len())));
            }
            vals.extend(row);
        }
        Ok(vals)
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let v = self.array(name, rows, cols)?;
        Ok(DMatrix::from_row_slice(rows, cols, &v))
    }

    fn mlp(&mut self, n: usize, h: usize, o: usize) -> Result<MlpParams> {
        let mut data = self.array("W1", h, n)?;
        data.extend(self.array("b1", h, 1)?);
        data.extend(self.array("W2", o, h)?);
        data.extend(self.array("b2", o, 1)?);
        MlpParams::from_flat(n, h, o, data)
    }

    fn dims(&mut self, keys: &[&str]) -> Result<Vec<usize>> {
        let (n, parts) = self.keyword("dims")?;
        let mut out = Vec::new();
        for (k, part) in keys.iter().zip(parts.iter().chain(std::iter::repeat(&""))) {
            let v = part
                .strip_prefix(&format!("{k}="))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| parse_err(self.path, n, format!("expected {k}=<int>")))?;
            out.push(v);
        }
        Ok(out)
    }

    fn normalization(&mut self) -> Result<Option<Normalization>> {
        let (n, parts) = self.keyword("normalization")?;
        if parts == ["none"] {
            return Ok(None);
        }
        if parts.len() != 6 {
            return Err(parse_err(self.path, n, "normalization needs `none` or 6 numbers"));
        }
        let v: Vec<f64> = parts.iter().map(|s| parse_f64(self.path, n, s)).collect::<Result<_>>()?;
        Ok(Some(Normalization {
            mean: [v[0], v[1], v[2]],
            std: [v[3], v[4], v[5]],
        }))
    }
}

pub fn parse_checkpoint(path: &Path, text: &str) -> Result<Checkpoint> {
    let provenance = read_provenance(text);
    let lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty())
        .collect();
    let mut p = CheckpointParser { path, lines, pos: 0 };
    let (kn, kind) = p.keyword("kind")?;
    let agent = if p.peek_keyword("agent") {
        let (n, parts) = p.keyword("agent")?;
        Some(
            parts
                .first()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| parse_err(path, n, "bad agent index"))?,
        )
    } else {
        None
    };
    let model = match kind.first().copied() {
        Some("koopman") => {
            let d = p.dims(&["n", "m", "r", "hidden"])?;
            let (n, m, r, h) = (d[0], d[1], d[2], d[3]);
            let normalization = p.normalization()?;
            let a = p.matrix("A", r, r)?;
            let b = p.matrix("B", r, m)?;
            let c = p.matrix("C", n, r)?;
            let theta = p.mlp(n, h, r)?;
            let mut model = KoopmanModel::new(a, b, c, theta)?;
            model.normalization = normalization;
            SavedModel::Koopman(model)
        }
        Some("mlp") => {
            let d = p.dims(&["in", "hidden", "out"])?;
            let normalization = p.normalization()?;
            let theta = p.mlp(d[0], d[1], d[2])?;
            SavedModel::Mlp(MlpBaselineModel { theta, normalization })
        }
        Some("truth") => {
            let (n, parts) = p.keyword("dt")?;
            let dt = parse_f64(path, n, parts.first().copied().unwrap_or(""))?;
            let s = p.array("scalars", 1, 4)?;
            let am = p.array("added_mass", 1, 3)?;
            let ld = p.array("linear_damping", 1, 3)?;
            let qd = p.array("quadratic_damping", 1, 3)?;
            let params = VesselParams {
                mass: s[0],
                yaw_inertia: s[1],
                thruster_offset: s[2],
                max_thrust: s[3],
                added_mass: [am[0], am[1], am[2]],
                linear_damping: [ld[0], ld[1], ld[2]],
                quadratic_damping: [qd[0], qd[1], qd[2]],
            };
            params.validate()?;
            SavedModel::Truth(TruthPredictor { params, dt })
        }
        _ => return Err(parse_err(path, kn, "kind must be koopman, mlp or truth")),
    };
    if let Some(&(n, _)) = p.lines.get(p.pos) {
        return Err(parse_err(path, n, "trailing content"));
    }
    Ok(Checkpoint {
        provenance,
        agent,
        model,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)?;
    parse_checkpoint(path, &text)
}

fn loss_columns(n: usize) -> String {
    (1..=n).map(|i| format!(",loss_{i}")).collect()
}

fn push_losses(out: &mut String, losses: &[f64]) {
    for l in losses {
        let _ = write!(out, ",{}", fmt_f64(*l));
    }
    out.push('\n');
}

/// Matrix-round history: one row per consensus round.
pub fn write_round_history_csv(path: &Path, h: &RunHistory, n_agents: usize, prov: &Provenance) -> Result<()> {
    let mut out = prov.comment("");
    let _ = writeln!(
        out,
        "s,disagreement_M,disagreement_C,dist_to_oracle_M,dist_to_oracle_C,mean_local_loss{}",
        loss_columns(n_agents)
    );
    for r in &h.matrix {
        let _ = write!(
            out,
            "{},{},{},{},{},{}",
            r.s,
            fmt_f64(r.disagreement_m),
            fmt_f64(r.disagreement_c),
            fmt_f64(r.dist_to_oracle_m),
            fmt_f64(r.dist_to_oracle_c),
            fmt_f64(r.mean_local_loss)
        );
        push_losses(&mut out, &r.local_losses);
    }
    write_text(path, &out)
}

/// Lift-step history: one row per mixing step.
pub fn write_theta_history_csv(path: &Path, h: &RunHistory, n_agents: usize, prov: &Provenance) -> Result<()> {
    let mut out = prov.comment("");
    let _ = writeln!(out, "s,disagreement_theta,mean_local_loss{}", loss_columns(n_agents));
    for r in &h.theta {
        let _ = write!(out, "{},{},{}", r.s, fmt_f64(r.disagreement_theta), fmt_f64(r.mean_local_loss));
        push_losses(&mut out, &r.local_losses);
    }
    write_text(path, &out)
}

pub fn write_baseline_history_csv(path: &Path, h: &BaselineHistory, prov: &Provenance) -> Result<()> {
    let mut out = prov.comment("");
    out.push_str("step,loss\n");
    for (k, l) in h.losses.iter().enumerate() {
        let _ = writeln!(out, "{k},{}", fmt_f64(*l));
    }
    write_text(path, &out)
}

pub const METRICS_HEADER: &str = "method,run,metric,std";

/// Per-run rows followed by one `mean` row per method.
pub fn metrics_to_csv(methods: &[MethodMetrics], prov: &Provenance) -> String {
    let mut out = prov.comment("");
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for m in methods {
        for (j, v) in m.per_run.iter().enumerate() {
            let _ = writeln!(out, "{},{j},{},", m.method, fmt_f64(*v));
        }
    }
    for m in methods {
        let _ = writeln!(out, "{},mean,{},{}", m.method, fmt_f64(m.mean), fmt_f64(m.std));
    }
    out
}

pub fn write_metrics_csv(path: &Path, methods: &[MethodMetrics], prov: &Provenance) -> Result<()> {
    write_text(path, &metrics_to_csv(methods, prov))
}

/// Per-run metrics by method, in file order; summary rows are recomputed by callers.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let text = fs::read_to_string(path)?;
    let (_, rows) = csv_rows(path, &text, Some(METRICS_HEADER))?;
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    for (line, row) in rows {
        if row.len() != 4 {
            return Err(parse_err(path, line, "expected 4 fields"));
        }
        if row[1] == "mean" {
            continue;
        }
        row[1].parse::<usize>().map_err(|_| parse_err(path, line, "run must be an index or `mean`"))?;
        let v = parse_f64(path, line, &row[2])?;
        match out.iter_mut().find(|(m, _)| *m == row[0]) {
            Some((_, vals)) => vals.push(v),
            None => out.push((row[0].clone(), vec![v])),
        }
    }
    Ok(out)
}

pub const TRACE_HEADER: &str = "t,px,py,phi,vx,vy,dphi,u_left,u_right,err_pos,err_yaw,solve_ms";

/// One row per state; the final row has empty input and timing fields.
pub fn write_trace_csv(path: &Path, trace: &ClosedLoopTrace, prov: &Provenance) -> Result<()> {
    let mut out = prov.comment("");
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for (t, x) in trace.states.iter().enumerate() {
        let _ = write!(out, "{t}");
        for v in x {
            let _ = write!(out, ",{}", fmt_f64(*v));
        }
        match trace.inputs.get(t) {
            Some(u) => {
                let _ = write!(out, ",{},{}", fmt_f64(u[0]), fmt_f64(u[1]));
            }
            None => out.push_str(",,"),
        }
        let _ = write!(out, ",{},{}", fmt_f64(trace.err_pos[t]), fmt_f64(trace.err_yaw[t]));
        match trace.solve_ms.get(t) {
            Some(ms) => {
                let _ = writeln!(out, ",{ms:.3}");
            }
            None => out.push_str(",\n"),
        }
    }
    write_text(path, &out)
}

/// Reads the configuration hash and seed recorded in any output file.
pub fn read_file_provenance(path: &Path) -> Result<Provenance> {
    let text = fs::read_to_string(path)?;
    if !text.starts_with('#') {
        return Err(parse_err(path, 1, "missing provenance comment"));
    }
    Ok(read_provenance(&text))
}
