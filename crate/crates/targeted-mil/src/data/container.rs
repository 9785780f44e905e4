//! The TMILDS01 dataset container: a versioned, self-describing binary
//! format holding a full [`BagDataset`] including generation provenance.
//!
//! Layout (little-endian after the magic):
//!
//! ```text
//! magic        8 bytes  "TMILDS01"
//! target_class u32
//! n_bags       u32
//! m            u32
//! mean_size    f64
//! std_size     f64
//! witness_rate f64
//! positive_fraction f64
//! seed         u64
//! sizes        u32 × n_bags
//! per bag:     bag_label u8, instance_labels u8 × n, data f64 × (n·m)
//! ```

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Bag, BagDataset, DataError, GenerationConfig};

const MAGIC: &[u8; 8] = b"TMILDS01";

/// Writes `dataset` to `path` in the TMILDS01 format.
pub fn save_bags(dataset: &BagDataset, path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let cfg = dataset.config();
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(dataset.target_class().into())?;
    w.write_u32::<LittleEndian>(len_u32(dataset.bags().len())?)?;
    w.write_u32::<LittleEndian>(len_u32(dataset.m())?)?;
    w.write_f64::<LittleEndian>(cfg.mean_size)?;
    w.write_f64::<LittleEndian>(cfg.std_size)?;
    w.write_f64::<LittleEndian>(cfg.witness_rate)?;
    w.write_f64::<LittleEndian>(cfg.positive_fraction)?;
    w.write_u64::<LittleEndian>(cfg.seed)?;
    for bag in dataset.bags() {
        w.write_u32::<LittleEndian>(len_u32(bag.n_instances())?)?;
    }
    for bag in dataset.bags() {
        w.write_u8(bag.bag_label())?;
        w.write_all(bag.instance_labels())?;
        for &v in bag.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn len_u32(n: usize) -> Result<u32, DataError> {
    u32::try_from(n).map_err(|_| DataError::Container(format!("count {n} exceeds u32")))
}

/// Loads a TMILDS01 file written by [`save_bags`].
pub fn load_bags(path: &Path) -> Result<BagDataset, DataError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| DataError::Container("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(DataError::Container(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let target_class = r.read_u32::<LittleEndian>()?;
    let target_class = u8::try_from(target_class)
        .map_err(|_| DataError::Container(format!("target_class {target_class} exceeds u8")))?;
    let n_bags = r.read_u32::<LittleEndian>()? as usize;
    let m = r.read_u32::<LittleEndian>()? as usize;
    let mean_size = r.read_f64::<LittleEndian>()?;
    let std_size = r.read_f64::<LittleEndian>()?;
    let witness_rate = r.read_f64::<LittleEndian>()?;
    let positive_fraction = r.read_f64::<LittleEndian>()?;
    let seed = r.read_u64::<LittleEndian>()?;
    let mut sizes = Vec::with_capacity(n_bags);
    for _ in 0..n_bags {
        sizes.push(r.read_u32::<LittleEndian>()? as usize);
    }
    let mut bags = Vec::with_capacity(n_bags);
    for (i, &n) in sizes.iter().enumerate() {
        let stored_label = r.read_u8()?;
        let mut labels = vec![0u8; n];
        r.read_exact(&mut labels)
            .map_err(|_| DataError::Container(format!("truncated labels in bag {i}")))?;
        let mut data = vec![0.0f64; n * m];
        r.read_f64_into::<LittleEndian>(&mut data)
            .map_err(|_| DataError::Container(format!("truncated data in bag {i}")))?;
        let bag = Bag::new(data, m, labels)?;
        if bag.bag_label() != stored_label {
            return Err(DataError::Container(format!(
                "bag {i}: stored label {stored_label} contradicts instance labels"
            )));
        }
        bags.push(bag);
    }
    // Reject trailing garbage.
    let mut tail = [0u8; 1];
    if r.read(&mut tail)? != 0 {
        return Err(DataError::Container("trailing bytes after payload".into()));
    }
    BagDataset::new(
        bags,
        target_class,
        GenerationConfig {
            n_bags,
            mean_size,
            std_size,
            witness_rate,
            positive_fraction,
            seed,
        },
    )
}
