//! Plain-text file formats.
//!
//! All CSV files are comma separated with a single header line of column
//! names; files that carry grid metadata start with one `key=value,...` line
//! prefixed by `#`. Floats are written in shortest round-trip form, so
//! reading a file back reproduces the values bit for bit.
//!
//! | file | columns |
//! |------|---------|
//! | geodesic | `t,x,y,alpha1,alpha2` |
//! | distance table | `# n=N`, header `i,j,bd`, rows in row-major order |
//! | enveloping function | `# delta=..,samples=..,rings=..,angles=..`, header `p_index,node_index,x,y,F,dFdx1,dFdx2,dFdtheta_p` |
//! | sinogram | `a,b,T,I` (boundary indices, length, integral) |
//! | trial summary | `trials,simple,valid,violations,worst_slack` |
//!
//! Trial records are JSON lines, one [`TrialRecord`] per line; volume
//! results and reports are pretty-printed JSON.

use std::io::{BufRead, Write};

use serde::Serialize;

use crate::envelope::{BoundaryDistanceTable, EnvelopingFunction};
use crate::error::{FinslerError, Result};
use crate::geodesic::Geodesic;
use crate::geom::{Covector, Point};
use crate::grid::PolarGrid;
use crate::monotone::{SweepSummary, TrialRecord};
use crate::xray::RaySample;

pub const GEODESIC_HEADER: &str = "t,x,y,alpha1,alpha2";
pub const TABLE_HEADER: &str = "i,j,bd";
pub const ENVELOPE_HEADER: &str = "p_index,node_index,x,y,F,dFdx1,dFdx2,dFdtheta_p";
pub const SINOGRAM_HEADER: &str = "a,b,T,I";
pub const SUMMARY_HEADER: &str = "trials,simple,valid,violations,worst_slack";

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || (1e-4..1e15).contains(&a) || !x.is_finite() {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

fn row(out: &mut impl Write, fields: &[String]) -> Result<()> {
    writeln!(out, "{}", fields.join(","))?;
    Ok(())
}

struct Reader<R> {
    lines: std::io::Lines<R>,
    line: usize,
}

impl<R: BufRead> Reader<R> {
    fn new(input: R) -> Self {
        Reader { lines: input.lines(), line: 0 }
    }

    fn next_line(&mut self) -> Result<Option<String>> {
        loop {
            let Some(l) = self.lines.next() else { return Ok(None) };
            self.line += 1;
            let l = l?;
            if !l.trim().is_empty() {
                return Ok(Some(l));
            }
        }
    }

    fn err(&self, msg: impl std::fmt::Display) -> FinslerError {
        FinslerError::Format(format!("line {}: {msg}", self.line))
    }

    fn expect_header(&mut self, header: &str) -> Result<()> {
        match self.next_line()? {
            Some(l) if l.trim() == header => Ok(()),
            Some(l) => Err(self.err(format!("expected header `{header}`, found `{l}`"))),
            None => Err(self.err("missing header")),
        }
    }

    fn metadata(&mut self, keys: &[&str]) -> Result<Vec<String>> {
        let l = self.next_line()?.ok_or_else(|| self.err("missing metadata line"))?;
        let body = l.strip_prefix('#').ok_or_else(|| self.err("metadata line must start with `#`"))?;
        let pairs: Vec<(&str, &str)> = body
            .split(',')
            .map(|kv| kv.trim().split_once('=').ok_or_else(|| self.err(format!("bad metadata entry `{kv}`"))))
            .collect::<Result<_>>()?;
        keys.iter()
            .map(|k| {
                pairs
                    .iter()
                    .find(|(key, _)| key == k)
                    .map(|(_, v)| v.to_string())
                    .ok_or_else(|| self.err(format!("metadata is missing `{k}`")))
            })
            .collect()
    }

    fn record<const N: usize>(&mut self) -> Result<Option<[String; N]>> {
        let Some(l) = self.next_line()? else { return Ok(None) };
        let fields: Vec<String> = l.split(',').map(|f| f.trim().to_string()).collect();
        let n = fields.len();
        fields.try_into().map(Some).map_err(|_| self.err(format!("expected {N} fields, found {n}")))
    }

    fn parse<T: std::str::FromStr>(&self, s: &str) -> Result<T> {
        s.parse().map_err(|_| self.err(format!("cannot parse `{s}`")))
    }
}

// ---------------------------------------------------------------------------

pub fn write_geodesic(out: &mut impl Write, g: &Geodesic) -> Result<()> {
    writeln!(out, "{GEODESIC_HEADER}")?;
    for i in 0..g.len() {
        let (x, a) = (g.positions[i], g.momenta[i]);
        row(out, &[g.times[i], x.x, x.y, a.x, a.y].map(fmt_f64))?;
    }
    Ok(())
}

pub fn read_geodesic(input: impl BufRead) -> Result<Geodesic> {
    let mut r = Reader::new(input);
    r.expect_header(GEODESIC_HEADER)?;
    let (mut times, mut positions, mut momenta) = (Vec::new(), Vec::new(), Vec::new());
    while let Some(f) = r.record::<5>()? {
        let v: Vec<f64> = f.iter().map(|s| r.parse(s)).collect::<Result<_>>()?;
        if times.last().is_some_and(|&t: &f64| v[0] < t) {
            return Err(r.err("times must be non-decreasing"));
        }
        times.push(v[0]);
        positions.push(Point::new(v[1], v[2]));
        momenta.push(Covector::new(v[3], v[4]));
    }
    if times.is_empty() {
        return Err(r.err("geodesic has no samples"));
    }
    let length = *times.last().expect("non-empty");
    Ok(Geodesic { times, positions, momenta, length })
}

pub fn write_table(out: &mut impl Write, t: &BoundaryDistanceTable) -> Result<()> {
    writeln!(out, "# n={}", t.n)?;
    writeln!(out, "{TABLE_HEADER}")?;
    for i in 0..t.n {
        for j in 0..t.n {
            row(out, &[i.to_string(), j.to_string(), fmt_f64(t.get(i, j))])?;
        }
    }
    Ok(())
}

pub fn read_table(input: impl BufRead) -> Result<BoundaryDistanceTable> {
    let mut r = Reader::new(input);
    let n: usize = {
        let meta = r.metadata(&["n"])?;
        r.parse(&meta[0])?
    };
    r.expect_header(TABLE_HEADER)?;
    let mut values = vec![f64::NAN; n * n];
    let mut seen = 0;
    while let Some([i, j, v]) = r.record::<3>()? {
        let (i, j): (usize, usize) = (r.parse(&i)?, r.parse(&j)?);
        if i >= n || j >= n {
            return Err(r.err(format!("index ({i}, {j}) out of range for n = {n}")));
        }
        values[i * n + j] = r.parse(&v)?;
        seen += 1;
    }
    if seen != n * n || values.iter().any(|v| v.is_nan()) {
        return Err(r.err(format!("expected {} entries, found {seen}", n * n)));
    }
    Ok(BoundaryDistanceTable { n, values })
}

pub fn write_envelope(out: &mut impl Write, env: &EnvelopingFunction) -> Result<()> {
    let g = &env.grid;
    writeln!(out, "# delta={},samples={},rings={},angles={}", fmt_f64(env.delta), env.samples, g.rings, g.angles)?;
    writeln!(out, "{ENVELOPE_HEADER}")?;
    for k in 0..env.samples {
        for node in 0..g.len() {
            let x = g.node(node);
            let d = env.differential(k, node);
            let mut fields = vec![k.to_string(), node.to_string()];
            fields.extend([x.x, x.y, env.value(k, node), d.x, d.y, env.dp(k, node)].map(fmt_f64));
            row(out, &fields)?;
        }
    }
    Ok(())
}

/// Reads an enveloping function; the `p`-derivatives are recomputed from the
/// values and must agree with the stored column.
pub fn read_envelope(input: impl BufRead) -> Result<EnvelopingFunction> {
    let mut r = Reader::new(input);
    let meta = r.metadata(&["delta", "samples", "rings", "angles"])?;
    let delta: f64 = r.parse(&meta[0])?;
    let samples: usize = r.parse(&meta[1])?;
    let grid = PolarGrid::new(r.parse(&meta[2])?, r.parse(&meta[3])?)?;
    r.expect_header(ENVELOPE_HEADER)?;
    let total = samples * grid.len();
    let mut values = vec![f64::NAN; total];
    let mut dx = vec![Covector::ZERO; total];
    let mut dp = vec![f64::NAN; total];
    let mut seen = 0;
    while let Some(f) = r.record::<8>()? {
        let (k, node): (usize, usize) = (r.parse(&f[0])?, r.parse(&f[1])?);
        if k >= samples || node >= grid.len() {
            return Err(r.err(format!("index ({k}, {node}) out of range")));
        }
        let i = k * grid.len() + node;
        values[i] = r.parse(&f[4])?;
        dx[i] = Covector::new(r.parse(&f[5])?, r.parse(&f[6])?);
        dp[i] = r.parse(&f[7])?;
        seen += 1;
    }
    if seen != total || values.iter().any(|v| v.is_nan()) {
        return Err(r.err(format!("expected {total} rows, found {seen}")));
    }
    let env = EnvelopingFunction::from_samples(delta, samples, grid, values, dx)?;
    let worst = env.dp.iter().zip(&dp).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if worst > 1e-9 * (1.0 + env.dp.iter().fold(0.0, |m: f64, v| m.max(v.abs()))) {
        return Err(FinslerError::Format(format!("stored dFdtheta_p differs from the recomputed values by {worst:e}")));
    }
    Ok(env)
}

pub fn write_sinogram(out: &mut impl Write, rays: &[RaySample]) -> Result<()> {
    writeln!(out, "{SINOGRAM_HEADER}")?;
    for s in rays {
        row(out, &[s.a.to_string(), s.b.to_string(), fmt_f64(s.length), fmt_f64(s.value)])?;
    }
    Ok(())
}

pub fn read_sinogram(input: impl BufRead) -> Result<Vec<RaySample>> {
    let mut r = Reader::new(input);
    r.expect_header(SINOGRAM_HEADER)?;
    let mut out = Vec::new();
    while let Some([a, b, t, i]) = r.record::<4>()? {
        out.push(RaySample { a: r.parse(&a)?, b: r.parse(&b)?, length: r.parse(&t)?, value: r.parse(&i)? });
    }
    Ok(out)
}

pub fn write_trials(out: &mut impl Write, records: &[TrialRecord]) -> Result<()> {
    for rec in records {
        serde_json::to_writer(&mut *out, rec)?;
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_trials(input: impl BufRead) -> Result<Vec<TrialRecord>> {
    let mut r = Reader::new(input);
    let mut out = Vec::new();
    while let Some(l) = r.next_line()? {
        out.push(serde_json::from_str(&l).map_err(|e| r.err(e))?);
    }
    Ok(out)
}

pub fn write_summary(out: &mut impl Write, s: &SweepSummary) -> Result<()> {
    writeln!(out, "{SUMMARY_HEADER}")?;
    row(out, &[s.trials.to_string(), s.simple.to_string(), s.valid.to_string(), s.violations.to_string(), fmt_f64(s.worst_slack)])
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(out: &mut impl Write, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

/// JSON has no NaN; `serde_json` writes it as `null`, which this reads back.
pub fn nullable_f64<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(<Option<f64> as serde::Deserialize>::deserialize(d)?.unwrap_or(f64::NAN))
}
