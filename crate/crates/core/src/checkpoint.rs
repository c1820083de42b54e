//! Binary container for policy, critic and replay snapshots.
//!
//! ```text
//! magic[16] | version u8 | kind u8 | descriptor | payload
//! ```
//!
//! All integers are `u64` and all reals `f64`, little-endian. Strings are a
//! length followed by UTF-8 bytes. The descriptor records the network layout
//! and parameter segments, so a file is self-describing.

use std::path::Path;

use crate::autodiff::{MlpLayout, ParamVector, Segment};
use crate::critic::{Critic, CriticSettings};
use crate::error::{Error, Result};
use crate::policy::GaussianPolicy;
use crate::replay::{ReplayBuffer, Transition};

pub const MAGIC: [u8; 16] = *b"OFFOAB-SNAPSHOT\0";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    Policy = 1,
    Critic = 2,
    Replay = 3,
}

impl Kind {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            1 => Ok(Kind::Policy),
            2 => Ok(Kind::Critic),
            3 => Ok(Kind::Replay),
            other => Err(Error::Format(format!("unknown snapshot kind {other}"))),
        }
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(kind: Kind) -> Self {
        let mut buf = MAGIC.to_vec();
        buf.push(VERSION);
        buf.push(kind as u8);
        Self { buf }
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn reals(&mut self, v: &[f64]) {
        self.usize(v.len());
        v.iter().for_each(|x| self.f64(*x));
    }

    fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn layout(&mut self, l: &MlpLayout) {
        self.usize(l.input_dim);
        self.usize(l.hidden.len());
        l.hidden.iter().for_each(|h| self.usize(*h));
        self.usize(l.output_dim);
    }

    fn params(&mut self, p: &ParamVector) {
        self.usize(p.segments().len());
        for seg in p.segments() {
            self.str(&seg.name);
            self.usize(seg.len);
        }
        self.reals(p.values());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn open(buf: &'a [u8], want: Kind) -> Result<Self> {
        let kind = peek_kind(buf)?;
        if kind != want {
            return Err(Error::Format(format!("expected a {want:?} snapshot, found {kind:?}")));
        }
        Ok(Self { buf, pos: MAGIC.len() + 2 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated at byte {}: need {n} more bytes", self.pos))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A count, bounded by the bytes left so corrupt lengths fail fast.
    fn count(&mut self, unit: usize) -> Result<usize> {
        let at = self.pos;
        let n = self.u64()?;
        let left = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(unit.max(1) as u64) > left {
            return Err(Error::Format(format!("length {n} at byte {at} exceeds remaining {left} bytes")));
        }
        Ok(n as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn reals(&mut self) -> Result<Vec<f64>> {
        let n = self.count(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn str(&mut self) -> Result<String> {
        let n = self.count(1)?;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format(format!("invalid UTF-8 at byte {at}")))
    }

    fn layout(&mut self) -> Result<MlpLayout> {
        let input = self.u64()? as usize;
        let n = self.count(8)?;
        let hidden = (0..n).map(|_| Ok(self.u64()? as usize)).collect::<Result<_>>()?;
        let output = self.u64()? as usize;
        Ok(MlpLayout::new(input, hidden, output))
    }

    fn params(&mut self) -> Result<ParamVector> {
        let n = self.count(16)?;
        let mut segments = Vec::with_capacity(n);
        let mut offset = 0;
        for _ in 0..n {
            let name = self.str()?;
            let len = self.u64()? as usize;
            segments.push(Segment { name, offset, len });
            offset += len;
        }
        ParamVector::from_parts(self.reals()?, segments)
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Checks magic and version and returns the snapshot kind.
pub fn peek_kind(buf: &[u8]) -> Result<Kind> {
    if buf.len() < MAGIC.len() + 2 || buf[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("missing snapshot header".into()));
    }
    if buf[MAGIC.len()] != VERSION {
        return Err(Error::Format(format!("unsupported snapshot version {}", buf[MAGIC.len()])));
    }
    Kind::from_byte(buf[MAGIC.len() + 1])
}

pub fn encode_policy(p: &GaussianPolicy) -> Vec<u8> {
    let mut w = Writer::new(Kind::Policy);
    w.layout(p.layout());
    w.params(p.params());
    w.buf
}

pub fn decode_policy(buf: &[u8]) -> Result<GaussianPolicy> {
    let mut r = Reader::open(buf, Kind::Policy)?;
    let layout = r.layout()?;
    let params = r.params()?;
    r.finish()?;
    GaussianPolicy::from_parts(layout, params)
}

/// Stores both the online weights and the target weights.
pub fn encode_critic(c: &Critic) -> Vec<u8> {
    let mut w = Writer::new(Kind::Critic);
    w.layout(c.layout());
    w.usize(c.state_dim());
    let s = c.settings();
    w.f64(s.gamma);
    w.f64(s.tau);
    w.u64(s.sync_interval);
    w.usize(s.k_samples);
    w.params(c.params());
    w.params(c.target_params());
    w.buf
}

/// Optimizer moments are not stored; a restored critic starts Adam afresh.
pub fn decode_critic(buf: &[u8]) -> Result<Critic> {
    let mut r = Reader::open(buf, Kind::Critic)?;
    let layout = r.layout()?;
    let state_dim = r.u64()? as usize;
    let settings = CriticSettings {
        gamma: r.f64()?,
        tau: r.f64()?,
        sync_interval: r.u64()?,
        k_samples: r.u64()? as usize,
    };
    let params = r.params()?;
    let target = r.params()?;
    r.finish()?;
    Critic::from_parts(layout, state_dim, params, target, settings)
}

/// Transitions are written oldest first.
pub fn encode_replay(b: &ReplayBuffer) -> Vec<u8> {
    let mut w = Writer::new(Kind::Replay);
    w.usize(b.capacity());
    w.usize(b.len());
    for t in b.iter_oldest_first() {
        w.reals(&t.s);
        w.reals(&t.a);
        w.f64(t.r);
        w.reals(&t.s_next);
        w.u64(t.done as u64);
        w.reals(&t.behavior_mean);
        w.reals(&t.behavior_std);
        w.reals(&t.behavior_logp_per_dim);
    }
    w.buf
}

/// Every restored record passes validation and the density audit.
pub fn decode_replay(buf: &[u8]) -> Result<ReplayBuffer> {
    let mut r = Reader::open(buf, Kind::Replay)?;
    let capacity = r.u64()? as usize;
    let n = r.count(8)?;
    let mut out = ReplayBuffer::new(capacity)?;
    for _ in 0..n {
        let t = Transition {
            s: r.reals()?,
            a: r.reals()?,
            r: r.f64()?,
            s_next: r.reals()?,
            done: match r.u64()? {
                0 => false,
                1 => true,
                other => return Err(Error::Format(format!("done flag {other} is not 0 or 1"))),
            },
            behavior_mean: r.reals()?,
            behavior_std: r.reals()?,
            behavior_logp_per_dim: r.reals()?,
        };
        t.audit()?;
        out.push(t)?;
    }
    r.finish()?;
    Ok(out)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn save_policy(path: &Path, p: &GaussianPolicy) -> Result<()> {
    write(path, &encode_policy(p))
}

pub fn load_policy(path: &Path) -> Result<GaussianPolicy> {
    decode_policy(&read(path)?)
}

pub fn save_critic(path: &Path, c: &Critic) -> Result<()> {
    write(path, &encode_critic(c))
}

pub fn load_critic(path: &Path) -> Result<Critic> {
    decode_critic(&read(path)?)
}

pub fn save_replay(path: &Path, b: &ReplayBuffer) -> Result<()> {
    write(path, &encode_replay(b))
}

pub fn load_replay(path: &Path) -> Result<ReplayBuffer> {
    decode_replay(&read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn policy() -> GaussianPolicy {
        GaussianPolicy::new(3, 2, vec![5, 4], -0.5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    fn replay(n: usize) -> ReplayBuffer {
        let p = policy();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = ReplayBuffer::new(4).unwrap();
        for k in 0..n {
            let s = vec![k as f64, 0.5, -1.0];
            let sample = p.sample_action(&s, &mut rng).unwrap();
            b.push(Transition::from_sample(s.clone(), &sample, 0.1 * k as f64, s, k % 3 == 0)).unwrap();
        }
        b
    }

    #[test]
    fn policy_round_trip_is_bit_exact() {
        let p = policy();
        let bytes = encode_policy(&p);
        assert_eq!(&bytes[..16], &MAGIC);
        assert_eq!(bytes[16], VERSION);
        let q = decode_policy(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(encode_policy(&q), bytes);
    }

    #[test]
    fn critic_round_trip_keeps_both_networks() {
        let mut c = Critic::new(3, 2, vec![6], CriticSettings::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        c.target_params_mut().update(|v| v.iter_mut().for_each(|x| *x *= 0.5)).unwrap();
        let d = decode_critic(&encode_critic(&c)).unwrap();
        assert_eq!(d.params(), c.params());
        assert_eq!(d.target_params(), c.target_params());
        assert_eq!(d.settings(), c.settings());
        assert_eq!(d.state_dim(), 3);
    }

    #[test]
    fn replay_round_trip_preserves_order_after_wraparound() {
        let b = replay(7);
        let d = decode_replay(&encode_replay(&b)).unwrap();
        assert_eq!(d.capacity(), 4);
        let x: Vec<&Transition> = b.iter_oldest_first().collect();
        let y: Vec<&Transition> = d.iter_oldest_first().collect();
        assert_eq!(x, y);
    }

    #[test]
    fn wrong_kind_and_bad_header_are_rejected() {
        let bytes = encode_policy(&policy());
        assert!(matches!(decode_critic(&bytes), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] ^= 1;
        assert!(decode_policy(&bad).is_err());
        let mut ver = bytes.clone();
        ver[16] = 99;
        assert!(decode_policy(&ver).is_err());
    }

    #[test]
    fn truncation_and_trailing_bytes_are_rejected() {
        let bytes = encode_replay(&replay(3));
        for cut in [17, 30, bytes.len() - 1] {
            assert!(matches!(decode_replay(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_replay(&long).is_err());
    }

    #[test]
    fn tampered_density_fails_audit_on_load() {
        let b = replay(1);
        let mut bytes = encode_replay(&b);
        // The last value written is the final per-dimension log density.
        let n = bytes.len();
        let v = f64::from_le_bytes(bytes[n - 8..].try_into().unwrap()) + 1e-6;
        bytes[n - 8..].copy_from_slice(&v.to_le_bytes());
        assert!(matches!(decode_replay(&bytes), Err(Error::Input { .. })));
    }

    #[test]
    fn files_round_trip() {
        let dir = std::env::temp_dir().join(format!("offoab-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("policy.bin");
        save_policy(&path, &policy()).unwrap();
        assert_eq!(load_policy(&path).unwrap(), policy());
        assert!(matches!(load_policy(&dir.join("missing.bin")), Err(Error::Io(_))));
        std::fs::remove_dir_all(dir).unwrap();
    }
}
