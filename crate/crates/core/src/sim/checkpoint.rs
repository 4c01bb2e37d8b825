//! Binary checkpoints of the coupled state at the end of initiation.
//!
//! A checkpoint stores, bit-exactly, everything needed to resume: the full
//! ionic state and active tension of every fine node, and for deforming
//! domains the mechanics solution vector plus the previous one (the solver
//! warm start extrapolates from the last two). A fingerprint of the mesh,
//! carving, and protocol configuration is stored alongside and verified on
//! load, so a checkpoint can never be resumed against a different geometry
//! than the one it was computed on.
//!
//! Several run-phase variants deliberately share one checkpoint: the swap
//! of cell parameters and conductivity happens *after* this point, so the
//! fingerprint excludes them.

use std::io::{Read, Write};
use std::path::Path;

use crate::cell::{CellState, N_VGATES};

use super::{fnv1a, SimError};

const MAGIC: &[u8; 8] = b"CEMCHK01";
/// f64 values per node: voltage, the gates, and the seven concentrations
/// and calcium-handling variables.
const STATE_WIDTH: usize = 1 + N_VGATES + 7;

/// A resumable snapshot of the coupled state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Fingerprint of the configuration that produced this state.
    pub fingerprint: u64,
    /// Simulated time at the snapshot, ms.
    pub t_ms: f64,
    /// Ionic state per fine node.
    pub states: Vec<CellState>,
    /// Active tension per fine node, kPa.
    pub tension: Vec<f64>,
    /// Mechanics solution (interleaved displacement/pressure unknowns);
    /// empty on static domains.
    pub mech_x: Vec<f64>,
    /// Previous mechanics solution, for warm-start extrapolation.
    pub mech_x_prev: Vec<f64>,
}

fn state_to_words(s: &CellState, out: &mut Vec<f64>) {
    out.push(s.v);
    out.extend_from_slice(&s.gates);
    out.extend_from_slice(&[s.f_cass, s.ryr_ready, s.ca_i, s.ca_sr, s.ca_ss, s.na_i, s.k_i]);
}

fn state_from_words(w: &[f64]) -> CellState {
    let mut gates = [0.0; N_VGATES];
    gates.copy_from_slice(&w[1..1 + N_VGATES]);
    let rest = &w[1 + N_VGATES..];
    CellState {
        v: w[0],
        gates,
        f_cass: rest[0],
        ryr_ready: rest[1],
        ca_i: rest[2],
        ca_sr: rest[3],
        ca_ss: rest[4],
        na_i: rest[5],
        k_i: rest[6],
    }
}

/// Writes `ck` to `path`, creating parent directories as needed.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), SimError> {
    if ck.tension.len() != ck.states.len() {
        return Err(SimError::Checkpoint(format!(
            "tension field has {} entries for {} nodes",
            ck.tension.len(),
            ck.states.len()
        )));
    }
    if ck.mech_x.len() != ck.mech_x_prev.len() {
        return Err(SimError::Checkpoint(
            "mechanics vectors have mismatched lengths".into(),
        ));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }

    let mut words: Vec<f64> = Vec::with_capacity(ck.states.len() * (STATE_WIDTH + 1));
    for s in &ck.states {
        state_to_words(s, &mut words);
    }
    words.extend_from_slice(&ck.tension);
    words.extend_from_slice(&ck.mech_x);
    words.extend_from_slice(&ck.mech_x_prev);

    let mut payload: Vec<u8> = Vec::with_capacity(words.len() * 8 + 64);
    payload.extend_from_slice(&ck.fingerprint.to_le_bytes());
    payload.extend_from_slice(&ck.t_ms.to_le_bytes());
    payload.extend_from_slice(&(ck.states.len() as u64).to_le_bytes());
    payload.extend_from_slice(&(ck.mech_x.len() as u64).to_le_bytes());
    for w in &words {
        payload.extend_from_slice(&w.to_le_bytes());
    }

    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&fnv1a(&payload).to_le_bytes())?;
    f.write_all(&payload)?;
    f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    Ok(())
}

/// Reads a checkpoint and verifies its integrity and its fingerprint
/// against `expect_fingerprint`.
pub fn load_checkpoint(path: &Path, expect_fingerprint: u64) -> Result<Checkpoint, SimError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let fail = |msg: String| Err(SimError::Checkpoint(format!("{}: {msg}", path.display())));

    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return fail("not a checkpoint file".into());
    }
    let digest = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let payload = &bytes[16..];
    if fnv1a(payload) != digest {
        return fail("payload digest mismatch (truncated or corrupted)".into());
    }

    let mut off = 0usize;
    let mut take_u64 = |payload: &[u8]| {
        let v = u64::from_le_bytes(payload[off..off + 8].try_into().unwrap());
        off += 8;
        v
    };
    let fingerprint = take_u64(payload);
    let t_bits = take_u64(payload);
    let n_nodes = take_u64(payload) as usize;
    let n_dofs = take_u64(payload) as usize;
    let t_ms = f64::from_bits(t_bits);

    if fingerprint != expect_fingerprint {
        return fail(format!(
            "configuration fingerprint {fingerprint:#018x} does not match the requested \
             experiment ({expect_fingerprint:#018x}); the checkpoint was made for a \
             different mesh, carving, or protocol"
        ));
    }

    let n_words = n_nodes * (STATE_WIDTH + 1) + 2 * n_dofs;
    if payload.len() - off != n_words * 8 {
        return fail(format!(
            "expected {} state bytes, found {}",
            n_words * 8,
            payload.len() - off
        ));
    }
    let words: Vec<f64> = payload[off..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut cursor = 0usize;
    let states: Vec<CellState> = (0..n_nodes)
        .map(|_| {
            let s = state_from_words(&words[cursor..cursor + STATE_WIDTH]);
            cursor += STATE_WIDTH;
            s
        })
        .collect();
    let tension = words[cursor..cursor + n_nodes].to_vec();
    cursor += n_nodes;
    let mech_x = words[cursor..cursor + n_dofs].to_vec();
    cursor += n_dofs;
    let mech_x_prev = words[cursor..cursor + n_dofs].to_vec();

    Ok(Checkpoint {
        fingerprint,
        t_ms,
        states,
        tension,
        mech_x,
        mech_x_prev,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize, n_dofs: usize) -> Checkpoint {
        let states: Vec<CellState> = (0..n)
            .map(|i| {
                let mut s = CellState::resting();
                s.v = -85.23 + i as f64 * 0.37;
                s.ca_i += 1e-6 * i as f64;
                s.gates[3] = (i as f64 * 0.01).sin().abs();
                s
            })
            .collect();
        Checkpoint {
            fingerprint: 0xdead_beef_cafe_f00d,
            t_ms: 5000.0,
            states,
            tension: (0..n).map(|i| i as f64 * 0.125).collect(),
            mech_x: (0..n_dofs).map(|i| (i as f64).sqrt()).collect(),
            mech_x_prev: (0..n_dofs).map(|i| (i as f64).sqrt() - 0.01).collect(),
        }
    }

    #[test]
    fn roundtrip_is_bitwise_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/run.ck");
        for (n, d) in [(7usize, 0usize), (5, 23)] {
            let ck = sample(n, d);
            save_checkpoint(&ck, &path).unwrap();
            let back = load_checkpoint(&path, ck.fingerprint).unwrap();
            assert_eq!(back, ck);
        }
    }

    #[test]
    fn fingerprint_mismatch_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ck");
        let ck = sample(4, 0);
        save_checkpoint(&ck, &path).unwrap();
        let err = load_checkpoint(&path, ck.fingerprint ^ 1).unwrap_err();
        assert!(matches!(err, SimError::Checkpoint(_)), "{err}");
        assert!(err.to_string().contains("fingerprint"));
    }

    #[test]
    fn corruption_and_truncation_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ck");
        let ck = sample(6, 10);
        save_checkpoint(&ck, &path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let truncated = &bytes[..bytes.len() - 9];
        std::fs::write(&path, truncated).unwrap();
        assert!(matches!(
            load_checkpoint(&path, ck.fingerprint),
            Err(SimError::Checkpoint(_))
        ));

        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x40;
        std::fs::write(&path, &flipped).unwrap();
        assert!(matches!(
            load_checkpoint(&path, ck.fingerprint),
            Err(SimError::Checkpoint(_))
        ));

        std::fs::write(&path, b"CEMCHK99 junk").unwrap();
        assert!(matches!(
            load_checkpoint(&path, ck.fingerprint),
            Err(SimError::Checkpoint(_))
        ));
    }
}
