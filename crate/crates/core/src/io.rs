//! File formats: model and reduced-model JSON, CSV tables, provenance.
//!
//! Floats are written as `{:.16e}` (17 significant digits) both in JSON and
//! CSV, so files round-trip exactly and are byte-stable across runs.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linsys::{InitialExpansion, ReducedSystem, SystemCoefficients};
use crate::models::BsSpec;
use crate::mor::ReductionDiagnostics;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MODEL_FORMAT: &str = "stochmor-model-1";
pub const REDUCED_FORMAT: &str = "stochmor-reduced-1";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Where a file came from: hash of the effective configuration, seed, version.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config: &[u8], seed: u64) -> Self {
        Provenance {
            tool: "stochmor".into(),
            version: VERSION.into(),
            config_sha256: sha256_hex(config),
            seed,
        }
    }

    /// `#`-prefixed lines for text outputs.
    pub fn header(&self) -> String {
        format!(
            "# {} {}\n# config_sha256 {}\n# seed {}\n",
            self.tool, self.version, self.config_sha256, self.seed
        )
    }
}

/// 17 significant digits; non-finite values spelled out.
pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

/// CSV with a provenance header, a column header line and pre-formatted cells.
pub fn write_csv<I>(path: &Path, prov: &Provenance, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = create(path)?;
    w.write_all(prov.header().as_bytes())?;
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::DimensionMismatch(format!(
                "CSV row has {} cells, header {}",
                row.len(),
                header.len()
            )));
        }
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Dense matrix as a whitespace-separated text block.
pub fn write_matrix(path: &Path, prov: &Provenance, m: &DMatrix<f64>) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(prov.header().as_bytes())?;
    writeln!(w, "# {} {}", m.nrows(), m.ncols())?;
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| num(m[(i, j)])).collect();
        writeln!(w, "{}", row.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

/// Pretty JSON with floats in `{:.16e}`; non-finite floats become `null`.
struct SciFormatter(PrettyFormatter<'static>);

impl Formatter for SciFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            write!(w, "{value:.16e}")
        } else {
            w.write_all(b"null")
        }
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SciFormatter(PrettyFormatter::new()));
    value
        .serialize(&mut ser)
        .map_err(|e| Error::NumericalFailure(format!("JSON serialisation failed: {e}")))?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = to_json(value)?;
    let mut w = create(path)?;
    w.write_all(s.as_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    parse_json(&text, &path.display().to_string())
}

pub fn parse_json<T: DeserializeOwned>(text: &str, context: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        context: context.into(),
        message: e.to_string(),
    })
}

pub type Rows = Vec<Vec<f64>>;

pub fn to_rows(m: &DMatrix<f64>) -> Rows {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn from_rows(rows: &Rows, what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Parse {
            context: what.into(),
            message: "rows have different lengths".into(),
        });
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// Nonzero entries `(row, col, value)` of a matrix.
pub fn to_triplets(m: &DMatrix<f64>) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if m[(i, j)] != 0.0 {
                out.push((i, j, m[(i, j)]));
            }
        }
    }
    out
}

pub fn from_triplets(n: usize, t: &[(usize, usize, f64)], what: &str) -> Result<DMatrix<f64>> {
    let mut m = DMatrix::zeros(n, n);
    for &(i, j, v) in t {
        if i >= n || j >= n {
            return Err(Error::Parse {
                context: what.into(),
                message: format!("entry ({i}, {j}) outside a {n}x{n} matrix"),
            });
        }
        m[(i, j)] = v;
    }
    Ok(m)
}

/// Black-Scholes parameters recorded next to the generic coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BsRecord {
    pub spec: BsSpec,
    pub model_seed: u64,
    pub xi: Vec<f64>,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub provenance: Provenance,
    pub n: usize,
    pub q: usize,
    pub horizon: f64,
    pub a: Rows,
    /// Sparse `N_i` as `(row, col, value)` triplets.
    pub noise: Vec<Vec<(usize, usize, f64)>>,
    pub x0: Rows,
    pub z0: Vec<f64>,
    pub c: Rows,
    pub k_m: Rows,
    pub black_scholes: Option<BsRecord>,
}

impl ModelFile {
    pub fn new(
        sys: &SystemCoefficients,
        z0: &InitialExpansion,
        black_scholes: Option<BsRecord>,
        provenance: Provenance,
    ) -> Self {
        ModelFile {
            format: MODEL_FORMAT.into(),
            provenance,
            n: sys.n(),
            q: sys.q(),
            horizon: sys.horizon,
            a: to_rows(&sys.a),
            noise: sys.noise.iter().map(to_triplets).collect(),
            x0: to_rows(&sys.x0),
            z0: z0.z0.iter().copied().collect(),
            c: to_rows(&sys.c),
            k_m: to_rows(&sys.k_m),
            black_scholes,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f: ModelFile = read_json(path)?;
        if f.format != MODEL_FORMAT {
            return Err(Error::Parse {
                context: path.display().to_string(),
                message: format!("expected format {MODEL_FORMAT}, found {}", f.format),
            });
        }
        Ok(f)
    }

    pub fn system(&self) -> Result<(SystemCoefficients, InitialExpansion)> {
        if self.noise.len() != self.q {
            return Err(Error::Parse {
                context: "model.noise".into(),
                message: format!("{} noise matrices for q = {}", self.noise.len(), self.q),
            });
        }
        let noise = self
            .noise
            .iter()
            .enumerate()
            .map(|(i, t)| from_triplets(self.n, t, &format!("model.noise[{i}]")))
            .collect::<Result<Vec<_>>>()?;
        let sys = SystemCoefficients::new(
            from_rows(&self.a, "model.a")?,
            noise,
            from_rows(&self.x0, "model.x0")?,
            from_rows(&self.c, "model.c")?,
            from_rows(&self.k_m, "model.k_m")?,
            self.horizon,
        )?;
        let z0 = InitialExpansion::new(nalgebra::DVector::from_vec(self.z0.clone()));
        if z0.z0.len() != sys.m() {
            return Err(Error::DimensionMismatch(format!(
                "z0 has length {}, X0 has {} columns",
                z0.z0.len(),
                sys.m()
            )));
        }
        Ok((sys, z0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedFile {
    pub format: String,
    pub provenance: Provenance,
    pub nhat: usize,
    pub algorithm: String,
    pub a: Rows,
    pub noise: Vec<Rows>,
    pub x0: Rows,
    pub c: Rows,
    pub v: Rows,
    pub w: Rows,
    pub s: Rows,
    pub cond_wv: f64,
    pub diagnostics: ReductionDiagnostics,
}

impl ReducedFile {
    pub fn new(red: &ReducedSystem, algorithm: &str, diagnostics: ReductionDiagnostics, provenance: Provenance) -> Self {
        ReducedFile {
            format: REDUCED_FORMAT.into(),
            provenance,
            nhat: red.nhat(),
            algorithm: algorithm.into(),
            a: to_rows(&red.a),
            noise: red.noise.iter().map(to_rows).collect(),
            x0: to_rows(&red.x0),
            c: to_rows(&red.c),
            v: to_rows(&red.v),
            w: to_rows(&red.w),
            s: to_rows(&red.s),
            cond_wv: red.cond_wv,
            diagnostics,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f: ReducedFile = read_json(path)?;
        if f.format != REDUCED_FORMAT {
            return Err(Error::Parse {
                context: path.display().to_string(),
                message: format!("expected format {REDUCED_FORMAT}, found {}", f.format),
            });
        }
        Ok(f)
    }

    /// The reduced system, checked against the full model it belongs to.
    pub fn reduced(&self, sys: &SystemCoefficients) -> Result<ReducedSystem> {
        let red = ReducedSystem {
            a: from_rows(&self.a, "reduced.a")?,
            noise: self
                .noise
                .iter()
                .enumerate()
                .map(|(i, r)| from_rows(r, &format!("reduced.noise[{i}]")))
                .collect::<Result<Vec<_>>>()?,
            x0: from_rows(&self.x0, "reduced.x0")?,
            c: from_rows(&self.c, "reduced.c")?,
            v: from_rows(&self.v, "reduced.v")?,
            w: from_rows(&self.w, "reduced.w")?,
            s: from_rows(&self.s, "reduced.s")?,
            cond_wv: self.cond_wv,
        };
        let k = self.nhat;
        let ok = red.a.shape() == (k, k)
            && red.noise.len() == sys.q()
            && red.noise.iter().all(|n| n.shape() == (k, k))
            && red.v.shape() == (sys.n(), k)
            && red.w.shape() == (sys.n(), k)
            && red.x0.shape() == (k, sys.m())
            && red.c.shape() == (sys.p(), k);
        if !ok {
            return Err(Error::DimensionMismatch(format!(
                "reduced model of order {k} does not fit the full model (n = {}, q = {}, m = {}, p = {})",
                sys.n(),
                sys.q(),
                sys.m(),
                sys.p()
            )));
        }
        Ok(red)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{generate_bs, BsSpec};

    #[test]
    fn numbers_keep_seventeen_digits() {
        let x = 0.1f64 + 0.2;
        let s = num(x);
        assert_eq!(s.parse::<f64>().unwrap(), x);
        assert_eq!(num(f64::NAN), "nan");
    }

    #[test]
    fn json_floats_round_trip() {
        let v = vec![1.0 / 3.0, -2.5e-300, 0.0, 123456.789];
        let s = to_json(&v).unwrap();
        let back: Vec<f64> = parse_json(&s, "test").unwrap();
        assert_eq!(v, back);
        assert!(s.contains("3.3333333333333331e-1"));
    }

    #[test]
    fn model_file_round_trip() {
        let spec = BsSpec { n: 4, ..BsSpec::basket() };
        let inst = generate_bs(&spec, 5).unwrap();
        let f = ModelFile::new(&inst.sys, &inst.z0, None, Provenance::new(b"cfg", 5));
        let text = to_json(&f).unwrap();
        let back: ModelFile = parse_json(&text, "model").unwrap();
        let (sys, z0) = back.system().unwrap();
        assert_eq!(sys, inst.sys);
        assert_eq!(z0, inst.z0);
    }

    #[test]
    fn parse_errors_name_the_location() {
        let err = parse_json::<ModelFile>("{\n  \"format\": 3\n}", "model.json").unwrap_err();
        match err {
            Error::Parse { context, message } => {
                assert_eq!(context, "model.json");
                assert!(message.contains("line 2"), "{message}");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn provenance_header_lines() {
        let p = Provenance::new(b"abc", 9);
        let h = p.header();
        assert!(h.starts_with("# stochmor "));
        assert!(h.contains("ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"));
        assert!(h.ends_with("# seed 9\n"));
    }
}
