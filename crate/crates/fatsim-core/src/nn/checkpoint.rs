//! Binary checkpoint format: little-endian f32 flat vector with a small
//! header carrying the architecture, parameter count, and round index.

use super::{ArchKind, Architecture, ModelParams, NnError};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"FATC";
const VERSION: u32 = 1;

pub fn save_checkpoint(params: &ModelParams, round: u64, path: &Path) -> Result<(), NnError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    let arch = &params.arch;
    w.write_u8(match arch.kind {
        ArchKind::ConvSmall => 0,
        ArchKind::Mlp => 1,
    })?;
    w.write_u32::<LittleEndian>(arch.input.0 as u32)?;
    w.write_u32::<LittleEndian>(arch.input.1 as u32)?;
    w.write_u32::<LittleEndian>(arch.input.2 as u32)?;
    w.write_u32::<LittleEndian>(arch.classes as u32)?;
    w.write_u32::<LittleEndian>(arch.hidden.len() as u32)?;
    for &h in &arch.hidden {
        w.write_u32::<LittleEndian>(h as u32)?;
    }
    w.write_u64::<LittleEndian>(round)?;
    w.write_u64::<LittleEndian>(params.param_count() as u64)?;
    for v in params.flatten() {
        w.write_f32::<LittleEndian>(v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, u64), NnError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    std::io::Read::read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Checkpoint(format!(
            "bad magic {magic:02x?}, expected {MAGIC:02x?}"
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let kind = match r.read_u8()? {
        0 => ArchKind::ConvSmall,
        1 => ArchKind::Mlp,
        k => return Err(NnError::Checkpoint(format!("unknown arch kind {k}"))),
    };
    let input = (
        r.read_u32::<LittleEndian>()? as usize,
        r.read_u32::<LittleEndian>()? as usize,
        r.read_u32::<LittleEndian>()? as usize,
    );
    let classes = r.read_u32::<LittleEndian>()? as usize;
    let hidden_len = r.read_u32::<LittleEndian>()? as usize;
    let mut hidden = Vec::with_capacity(hidden_len);
    for _ in 0..hidden_len {
        hidden.push(r.read_u32::<LittleEndian>()? as usize);
    }
    let round = r.read_u64::<LittleEndian>()?;
    let count = r.read_u64::<LittleEndian>()? as usize;
    let arch = Architecture { kind, input, classes, hidden };
    let expected = arch.param_count()?;
    if expected != count {
        return Err(NnError::Checkpoint(format!(
            "header count {count} does not match architecture count {expected}"
        )));
    }
    let mut flat = vec![0.0f32; count];
    r.read_f32_into::<LittleEndian>(&mut flat)?;
    Ok((ModelParams::unflatten(&arch, &flat)?, round))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits_and_round() {
        let arch = Architecture::mlp((1, 4, 4), vec![6], 3);
        let p = ModelParams::build(&arch, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&p, 42, &path).unwrap();
        let (q, round) = load_checkpoint(&path).unwrap();
        assert_eq!(round, 42);
        assert_eq!(q.arch, arch);
        assert!(p.flatten().iter().zip(q.flatten()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.ckpt");
        std::fs::write(&path, b"NOPExxxxxxxxxxxxxxxx").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }
}
