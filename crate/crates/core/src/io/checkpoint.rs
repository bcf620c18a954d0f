//! Binary checkpoints of a [`Reconciler`].
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes   "DYNRECON"
//! version    u32       CHECKPOINT_VERSION
//! time       str       label of the last observed row
//! hierarchy  u64 count, then (parent str, child str) edges
//!            u64 count, then (id str, level str) labels
//! config     str       reconciler configuration as JSON
//! mode       u8        0 prior, 1 one-step, 2 two-step
//! mrdlm      steps u64, factor rows, subsets, factor model?, base models
//! sources    opt<list<str>>, list<str> upper, list<str> lower
//! combiner   opt<combiner>
//! two-step   opt<(opt<combiner> upper, list<combiner> lowers)>
//! pending    opt<pending inputs>
//! checksum   u64       FNV-1a of every preceding byte
//! ```
//!
//! `str` is a u64 byte length and UTF-8 bytes, `opt<x>` a u8 flag and `x`,
//! vectors a u64 length and f64 values, matrices u64 rows, u64 columns and
//! f64 values in column-major order.

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector};

use crate::combination::{Combiner, FlatCombination, HierCombination};
use crate::disagg::RegressorPanel;
use crate::dlm::{Dlm, MatrixVarianceState, MultiDlm, SvdState, VarianceState};
use crate::error::{Error, Result};
use crate::factor::GaussianFactorMoments;
use crate::hierarchy::Hierarchy;
use crate::mrdlm::{base_spec, Mrdlm};
use crate::pipeline::step::{Pending, TwoStepState};
use crate::pipeline::{Mode, Reconciler, ReconcilerConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DYNRECON";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A saved reconciler and the time label of its last observation.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub reconciler: Reconciler,
    pub last_time: String,
}

fn corrupt(what: &str) -> Error {
    Error::Checkpoint(format!("corrupt checkpoint: {what}"))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

struct Enc {
    buf: Vec<u8>,
}

impl Enc {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u64(&mut self, v: usize) {
        self.buf.write_u64::<LE>(v as u64).expect("vec write");
    }

    fn f64(&mut self, v: f64) {
        self.buf.write_f64::<LE>(v).expect("vec write");
    }

    fn str(&mut self, s: &str) {
        self.u64(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn strs(&mut self, v: &[String]) {
        self.u64(v.len());
        v.iter().for_each(|s| self.str(s));
    }

    fn idx(&mut self, v: &[usize]) {
        self.u64(v.len());
        v.iter().for_each(|&x| self.u64(x));
    }

    fn opt_f64(&mut self, v: Option<f64>) {
        self.u8(v.is_some() as u8);
        if let Some(x) = v {
            self.f64(x);
        }
    }

    fn vec(&mut self, v: &DVector<f64>) {
        self.u64(v.len());
        v.iter().for_each(|&x| self.f64(x));
    }

    fn mat(&mut self, m: &DMatrix<f64>) {
        self.u64(m.nrows());
        self.u64(m.ncols());
        m.iter().for_each(|&x| self.f64(x));
    }

    fn svd(&mut self, s: &SvdState) {
        self.vec(&s.m);
        self.mat(&s.u);
        self.vec(&s.s);
    }

    fn moments(&mut self, g: &GaussianFactorMoments) {
        self.vec(g.mean());
        self.mat(g.loadings());
        self.mat(g.factor_cov());
        self.vec(g.specific());
    }

    fn panel(&mut self, p: &RegressorPanel) {
        self.strs(&p.sources);
        self.mat(&p.h);
        self.mat(&p.var);
        self.u64(p.present.len());
        for row in &p.present {
            self.u64(row.len());
            row.iter().for_each(|&b| self.u8(b as u8));
        }
    }

    fn combiner(&mut self, c: &Combiner) {
        match c {
            Combiner::Flat(f) => {
                self.u8(0);
                self.u64(f.k);
                self.vec(&f.m);
                self.mat(&f.c);
                self.f64(f.discount);
                self.opt_f64(f.nu);
            }
            Combiner::Hier(h) => {
                self.u8(1);
                self.vec(&h.m_h);
                self.mat(&h.c_h);
                self.vec(&h.v);
                self.f64(h.discount);
                self.opt_f64(h.nu);
                self.mat(&h.m_b);
                self.u64(h.c_b.len());
                h.c_b.iter().for_each(|m| self.mat(m));
            }
        }
    }
}

struct Dec<'a> {
    cur: Cursor<&'a [u8]>,
}

impl Dec<'_> {
    fn remaining(&self) -> usize {
        self.cur.get_ref().len() - self.cur.position() as usize
    }

    fn u8(&mut self) -> Result<u8> {
        self.cur.read_u8().map_err(|_| corrupt("truncated"))
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(corrupt(&format!("flag byte {v}"))),
        }
    }

    fn u64(&mut self) -> Result<usize> {
        let v = self.cur.read_u64::<LE>().map_err(|_| corrupt("truncated"))?;
        usize::try_from(v).map_err(|_| corrupt("length overflow"))
    }

    /// A count of items of at least `unit` bytes each.
    fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.u64()?;
        if n.saturating_mul(unit) > self.remaining() {
            return Err(corrupt("length exceeds the file"));
        }
        Ok(n)
    }

    fn f64(&mut self) -> Result<f64> {
        self.cur.read_f64::<LE>().map_err(|_| corrupt("truncated"))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        let mut b = vec![0; n];
        self.cur.read_exact(&mut b).map_err(|_| corrupt("truncated"))?;
        String::from_utf8(b).map_err(|_| corrupt("invalid UTF-8"))
    }

    fn strs(&mut self) -> Result<Vec<String>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.str()).collect()
    }

    fn idx(&mut self) -> Result<Vec<usize>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.u64()).collect()
    }

    fn opt_f64(&mut self) -> Result<Option<f64>> {
        Ok(if self.flag()? { Some(self.f64()?) } else { None })
    }

    fn vec(&mut self) -> Result<DVector<f64>> {
        let n = self.len(8)?;
        let v = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(DVector::from_vec(v))
    }

    fn mat(&mut self) -> Result<DMatrix<f64>> {
        let r = self.u64()?;
        let c = self.u64()?;
        if r.saturating_mul(c).saturating_mul(8) > self.remaining() {
            return Err(corrupt("matrix exceeds the file"));
        }
        let v = (0..r * c).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_vec(r, c, v))
    }

    fn svd(&mut self) -> Result<SvdState> {
        Ok(SvdState {
            m: self.vec()?,
            u: self.mat()?,
            s: self.vec()?,
        })
    }

    fn moments(&mut self) -> Result<GaussianFactorMoments> {
        let (mean, loadings, cov, specific) = (self.vec()?, self.mat()?, self.mat()?, self.vec()?);
        GaussianFactorMoments::new(mean, loadings, cov, specific)
    }

    fn panel(&mut self) -> Result<RegressorPanel> {
        let sources = self.strs()?;
        let h = self.mat()?;
        let var = self.mat()?;
        let rows = self.len(8)?;
        let present = (0..rows)
            .map(|_| {
                let n = self.len(1)?;
                (0..n).map(|_| self.flag()).collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RegressorPanel {
            sources,
            h,
            var,
            present,
        })
    }

    fn combiner(&mut self) -> Result<Combiner> {
        match self.u8()? {
            0 => Ok(Combiner::Flat(FlatCombination {
                k: self.u64()?,
                m: self.vec()?,
                c: self.mat()?,
                discount: self.f64()?,
                nu: self.opt_f64()?,
            })),
            1 => {
                let (m_h, c_h, v, discount, nu, m_b) =
                    (self.vec()?, self.mat()?, self.vec()?, self.f64()?, self.opt_f64()?, self.mat()?);
                let n = self.len(16)?;
                let c_b = (0..n).map(|_| self.mat()).collect::<Result<Vec<_>>>()?;
                Ok(Combiner::Hier(HierCombination {
                    m_h,
                    c_h,
                    v,
                    discount,
                    nu,
                    m_b,
                    c_b,
                }))
            }
            t => Err(corrupt(&format!("combiner tag {t}"))),
        }
    }
}

fn mode_tag(m: Mode) -> u8 {
    match m {
        Mode::Prior => 0,
        Mode::OneStep => 1,
        Mode::TwoStep => 2,
    }
}

/// Writes `rec` and the label of its last observation.
pub fn write_checkpoint<W: Write>(mut w: W, rec: &Reconciler, last_time: &str) -> Result<()> {
    let mut e = Enc { buf: Vec::new() };
    e.buf.extend_from_slice(CHECKPOINT_MAGIC);
    e.buf.write_u32::<LE>(CHECKPOINT_VERSION)?;
    e.str(last_time);

    let h = &rec.hierarchy;
    let edges = h.edges();
    e.u64(edges.len());
    for (p, c) in edges {
        e.str(p);
        e.str(c);
    }
    e.u64(h.n());
    for i in 0..h.n() {
        e.str(h.id(i));
        e.str(h.level(i));
    }
    e.str(&serde_json::to_string(&rec.cfg)?);
    e.u8(mode_tag(rec.mode));

    let m = &rec.mrdlm;
    e.u64(m.steps);
    e.idx(&m.factor_rows);
    e.u64(m.subsets.len());
    m.subsets.iter().for_each(|s| e.idx(s));
    e.u8(m.factor.is_some() as u8);
    if let Some(f) = &m.factor {
        e.svd(&f.state);
        e.f64(f.var.n);
        e.mat(&f.var.d);
    }
    e.u64(m.base.len());
    for d in &m.base {
        e.svd(&d.state);
        e.f64(d.var.n);
        e.f64(d.var.d);
    }

    e.u8(rec.sources.is_some() as u8);
    if let Some(s) = &rec.sources {
        e.strs(s);
    }
    e.strs(&rec.upper_sources);
    e.strs(&rec.lower_sources);
    e.u8(rec.combiner.is_some() as u8);
    if let Some(c) = &rec.combiner {
        e.combiner(c);
    }
    e.u8(rec.two.is_some() as u8);
    if let Some(t) = &rec.two {
        e.u8(t.upper.is_some() as u8);
        if let Some(c) = &t.upper {
            e.combiner(c);
        }
        e.u64(t.lowers.len());
        t.lowers.iter().for_each(|c| e.combiner(c));
    }
    e.u8(rec.pending.is_some() as u8);
    if let Some(p) = &rec.pending {
        e.moments(&p.prior);
        e.panel(&p.panel);
        e.u8(p.upper.is_some() as u8);
        if let Some((g, panel)) = &p.upper {
            e.moments(g);
            e.panel(panel);
        }
    }
    let sum = fnv1a(&e.buf);
    e.buf.write_u64::<LE>(sum)?;
    w.write_all(&e.buf)?;
    Ok(())
}

/// Reads a checkpoint written by [`write_checkpoint`].
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if fnv1a(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
        return Err(corrupt("checksum mismatch"));
    }
    let mut d = Dec {
        cur: Cursor::new(&body[12..]),
    };
    let last_time = d.str()?;

    let n_edges = d.len(16)?;
    let edges = (0..n_edges).map(|_| Ok((d.str()?, d.str()?))).collect::<Result<Vec<_>>>()?;
    let n_labels = d.len(16)?;
    let labels = (0..n_labels).map(|_| Ok((d.str()?, d.str()?))).collect::<Result<BTreeMap<_, _>>>()?;
    let hierarchy = if edges.is_empty() {
        let (id, level) = labels.iter().next().ok_or_else(|| corrupt("empty hierarchy"))?;
        Hierarchy::singleton(id, level)
    } else {
        Hierarchy::from_edges_with_levels(&edges, &labels)?
    };
    let cfg: ReconcilerConfig = serde_json::from_str(&d.str()?)?;
    let mode = match d.u8()? {
        0 => Mode::Prior,
        1 => Mode::OneStep,
        2 => Mode::TwoStep,
        t => return Err(corrupt(&format!("mode tag {t}"))),
    };

    let steps = d.u64()?;
    let factor_rows = d.idx()?;
    let n_sub = d.len(8)?;
    let subsets = (0..n_sub).map(|_| d.idx()).collect::<Result<Vec<_>>>()?;
    let mcfg = cfg.mrdlm_config(factor_rows.len())?;
    let factor = if d.flag()? {
        let state = d.svd()?;
        let var = MatrixVarianceState::new(d.f64()?, d.mat()?)?;
        Some(MultiDlm::new(mcfg.factor_spec.clone(), factor_rows.len(), state, var)?)
    } else {
        None
    };
    let n_b = d.len(24)?;
    if n_b != hierarchy.n_b() || subsets.len() != n_b {
        return Err(corrupt("base model count does not match the hierarchy"));
    }
    let base = (0..n_b)
        .map(|i| {
            let spec = base_spec(&mcfg.base_spec, subsets[i].len(), mcfg.regression_discount)?;
            let state = d.svd()?;
            let var = VarianceState::new(d.f64()?, d.f64()?)?;
            Dlm::new(spec, state, var)
        })
        .collect::<Result<Vec<_>>>()?;
    let mrdlm = Mrdlm {
        factor_rows,
        factor,
        base,
        subsets,
        steps,
    };

    let sources = if d.flag()? { Some(d.strs()?) } else { None };
    let upper_sources = d.strs()?;
    let lower_sources = d.strs()?;
    let combiner = if d.flag()? { Some(d.combiner()?) } else { None };
    let two = if d.flag()? {
        let mut t = TwoStepState::new(&hierarchy, &cfg)?;
        t.upper = if d.flag()? { Some(d.combiner()?) } else { None };
        let n = d.len(1)?;
        t.lowers = (0..n).map(|_| d.combiner()).collect::<Result<_>>()?;
        Some(t)
    } else {
        None
    };
    if (mode == Mode::TwoStep) != two.is_some() {
        return Err(corrupt("two-step state does not match the mode"));
    }
    let pending = if d.flag()? {
        let prior = d.moments()?;
        let panel = d.panel()?;
        let upper = if d.flag()? { Some((d.moments()?, d.panel()?)) } else { None };
        Some(Pending { prior, panel, upper })
    } else {
        None
    };
    if d.remaining() != 0 {
        return Err(corrupt("trailing bytes"));
    }
    Ok(Checkpoint {
        reconciler: Reconciler {
            hierarchy,
            cfg,
            mode,
            mrdlm,
            sources,
            upper_sources,
            lower_sources,
            combiner,
            two,
            pending,
        },
        last_time,
    })
}
