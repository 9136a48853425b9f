//! Line-oriented trace format.
//!
//! ```text
//! # seq,blade,pdid,op,arg1[,arg2]
//! 1,0,7,ALLOC,16384,buf
//! 2,0,7,W,$buf+0x1000
//! 3,1,7,R,$buf+4096
//! 4,0,7,SETPERM,$buf,r
//! 5,0,7,FREE,$buf
//! 6,1,7,R,0x40000000
//! ```
//!
//! ALLOC binds a name because allocation addresses are chosen by the
//! simulator. The binding survives FREE, so stale references stay expressible.

use std::fmt;
use std::io::BufRead;

use thiserror::Error;

use super::config::parse_size;
use crate::types::{ComputeBladeId, Pdid, PermissionClass};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("trace line {line}: {msg}")]
pub struct TraceError {
    pub line: usize,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum AddrRef {
    Abs(u64),
    Sym { name: String, offset: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Op {
    Read(AddrRef),
    Write(AddrRef),
    Alloc { size: u64, name: String },
    Free(String),
    SetPerm { name: String, pc: PermissionClass },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TraceOp {
    /// Source line, or 0 for generated events.
    pub line: usize,
    pub seq: u64,
    pub blade: ComputeBladeId,
    pub pdid: Pdid,
    pub op: Op,
}

impl fmt::Display for AddrRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AddrRef::Abs(a) => write!(f, "{a:#x}"),
            AddrRef::Sym { name, offset } => write!(f, "${name}+{offset:#x}"),
        }
    }
}

impl fmt::Display for TraceOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},", self.seq, self.blade.0, self.pdid.0)?;
        match &self.op {
            Op::Read(a) => write!(f, "R,{a}"),
            Op::Write(a) => write!(f, "W,{a}"),
            Op::Alloc { size, name } => write!(f, "ALLOC,{size},{name}"),
            Op::Free(name) => write!(f, "FREE,${name}"),
            Op::SetPerm { name, pc } => write!(f, "SETPERM,${name},{pc}"),
        }
    }
}

pub fn to_text(ops: &[TraceOp]) -> String {
    let mut s = String::from("# seq,blade,pdid,op,arg1[,arg2]\n");
    for op in ops {
        s.push_str(&op.to_string());
        s.push('\n');
    }
    s
}

fn name(s: &str) -> Option<String> {
    let n = s.strip_prefix('$').unwrap_or(s);
    let ok = !n.is_empty() && n.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.');
    ok.then(|| n.to_string())
}

fn addr(s: &str) -> Option<AddrRef> {
    if let Some(sym) = s.strip_prefix('$') {
        let (n, off) = match sym.split_once('+') {
            Some((n, off)) => (n, parse_size(off)?),
            None => (sym, 0),
        };
        return Some(AddrRef::Sym { name: name(n)?, offset: off });
    }
    parse_size(s).map(AddrRef::Abs)
}

fn parse_line(line: usize, text: &str) -> Result<TraceOp, TraceError> {
    let err = |msg: String| TraceError { line, msg };
    let f: Vec<&str> = text.split(',').map(str::trim).collect();
    if f.len() < 5 {
        return Err(err(format!("expected at least 5 fields, found {}", f.len())));
    }
    let seq = f[0].parse().map_err(|_| err(format!("bad seq `{}`", f[0])))?;
    let blade = f[1].parse().map(ComputeBladeId).map_err(|_| err(format!("bad blade `{}`", f[1])))?;
    let pdid = f[2].parse().map(Pdid).map_err(|_| err(format!("bad pdid `{}`", f[2])))?;
    let arity = |n: usize| {
        if f.len() == n {
            Ok(())
        } else {
            Err(err(format!("{} takes {} argument(s)", f[3], n - 4)))
        }
    };
    let op = match f[3] {
        "R" | "W" => {
            arity(5)?;
            let a = addr(f[4]).ok_or_else(|| err(format!("bad address `{}`", f[4])))?;
            if f[3] == "R" {
                Op::Read(a)
            } else {
                Op::Write(a)
            }
        }
        "ALLOC" => {
            arity(6)?;
            let size = parse_size(f[4]).ok_or_else(|| err(format!("bad size `{}`", f[4])))?;
            let name = name(f[5]).ok_or_else(|| err(format!("bad name `{}`", f[5])))?;
            Op::Alloc { size, name }
        }
        "FREE" => {
            arity(5)?;
            Op::Free(name(f[4]).ok_or_else(|| err(format!("bad name `{}`", f[4])))?)
        }
        "SETPERM" => {
            arity(6)?;
            let name = name(f[4]).ok_or_else(|| err(format!("bad name `{}`", f[4])))?;
            let pc = PermissionClass::parse(f[5]).ok_or_else(|| err(format!("bad permission `{}`", f[5])))?;
            Op::SetPerm { name, pc }
        }
        other => return Err(err(format!("unknown op `{other}`"))),
    };
    Ok(TraceOp { line, seq, blade, pdid, op })
}

pub fn parse(text: &str) -> Result<Vec<TraceOp>, TraceError> {
    parse_reader(text.as_bytes())
}

pub fn parse_reader(r: impl BufRead) -> Result<Vec<TraceOp>, TraceError> {
    let mut ops: Vec<TraceOp> = Vec::new();
    for (i, l) in r.lines().enumerate() {
        let line = i + 1;
        let l = l.map_err(|e| TraceError { line, msg: e.to_string() })?;
        let body = l.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let op = parse_line(line, body)?;
        if let Some(prev) = ops.last() {
            if op.seq <= prev.seq {
                return Err(TraceError { line, msg: format!("seq {} does not follow {}", op.seq, prev.seq) });
            }
        }
        ops.push(op);
    }
    Ok(ops)
}
