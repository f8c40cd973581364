//! The active party's log of concatenated embeddings, one record per
//! `(epoch, batch)`, and its on-disk format.
//!
//! File layout, all little-endian:
//!
//! ```text
//! magic "VFES" | version u32 | K u32 | K x (party u32, width u32) | batch_size u32
//! then per record, in key order:
//! epoch u32 | batch u32 | rows u32 | rows x sample_id u64 | rows*width x f64
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use log::warn;

use super::message::PartyId;
use crate::data::SampleId;
use crate::nn::DenseMatrix;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"VFES";
pub const STORE_VERSION: u32 = 1;

/// Columns of the concatenated embedding owned by one party.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartySlice {
    pub party: PartyId,
    pub start: usize,
    pub width: usize,
}

impl PartySlice {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.width
    }
}

/// Builds the contiguous layout for `(party, width)` pairs in the given order.
pub fn layout_from_widths(widths: &[(PartyId, usize)]) -> Vec<PartySlice> {
    let mut start = 0;
    widths
        .iter()
        .map(|&(party, width)| {
            let s = PartySlice {
                party,
                start,
                width,
            };
            start += width;
            s
        })
        .collect()
}

/// Checks that slices are in ascending party order and tile `0..cols`.
pub fn check_layout(slices: &[PartySlice], cols: usize) -> Result<()> {
    let mut next = 0;
    for (i, s) in slices.iter().enumerate() {
        if s.start != next || s.width == 0 {
            return Err(Error::Storage(format!(
                "slice for party {} does not continue the tiling at column {next}",
                s.party
            )));
        }
        if i > 0 && slices[i - 1].party >= s.party {
            return Err(Error::Storage("slices are not in ascending party order".into()));
        }
        next += s.width;
    }
    if next != cols {
        return Err(Error::Storage(format!(
            "slices cover {next} columns but the record has {cols}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BatchKey {
    pub epoch: u32,
    pub batch: u32,
}

impl BatchKey {
    pub fn new(epoch: usize, batch: usize) -> Self {
        Self {
            epoch: epoch as u32,
            batch: batch as u32,
        }
    }
}

/// One stored minibatch: `H^t` and the ids of its rows.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredBatch {
    pub concat: DenseMatrix,
    pub sample_ids: Vec<SampleId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    batch_size: u32,
    layout: Vec<PartySlice>,
    records: BTreeMap<BatchKey, StoredBatch>,
    retain_epochs: Option<usize>,
}

impl EmbeddingStore {
    pub fn new(batch_size: usize) -> Self {
        Self {
            batch_size: batch_size as u32,
            layout: Vec::new(),
            records: BTreeMap::new(),
            retain_epochs: None,
        }
    }

    /// Keeps only the most recent `epochs` epochs after each write.
    pub fn with_retention(mut self, epochs: Option<usize>) -> Self {
        self.retain_epochs = epochs;
        self
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size as usize
    }

    pub fn layout(&self) -> &[PartySlice] {
        &self.layout
    }

    pub fn width(&self) -> usize {
        self.layout.iter().map(|s| s.width).sum()
    }

    pub fn slice_of(&self, party: PartyId) -> Option<PartySlice> {
        self.layout.iter().copied().find(|s| s.party == party)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, key: BatchKey) -> Option<&StoredBatch> {
        self.records.get(&key)
    }

    /// Records in key order, which is also write order during training.
    pub fn records(&self) -> impl Iterator<Item = (&BatchKey, &StoredBatch)> {
        self.records.iter()
    }

    pub fn epochs(&self) -> BTreeSet<u32> {
        self.records.keys().map(|k| k.epoch).collect()
    }

    pub fn epoch_records(&self, epoch: u32) -> impl Iterator<Item = (&BatchKey, &StoredBatch)> {
        self.records
            .range(BatchKey { epoch, batch: 0 }..=BatchKey { epoch, batch: u32::MAX })
    }

    /// Persists one record. Slices must tile the concat and, while the store
    /// holds records, match the existing layout. A repeated key overwrites.
    pub fn put(
        &mut self,
        key: BatchKey,
        concat: DenseMatrix,
        slices: &[PartySlice],
        sample_ids: Vec<SampleId>,
    ) -> Result<()> {
        check_layout(slices, concat.cols())?;
        if sample_ids.len() != concat.rows() {
            return Err(Error::Storage(format!(
                "{} sample ids for {} rows",
                sample_ids.len(),
                concat.rows()
            )));
        }
        if self.records.is_empty() {
            self.layout = slices.to_vec();
        } else if self.layout != slices {
            return Err(Error::Protocol(
                "record layout differs from the store's party layout".into(),
            ));
        }
        if self
            .records
            .insert(key, StoredBatch { concat, sample_ids })
            .is_some()
        {
            warn!(
                "embedding store: overwriting record for epoch {} batch {}",
                key.epoch, key.batch
            );
        }
        if let Some(keep) = self.retain_epochs {
            self.compact(key.epoch, keep);
        }
        Ok(())
    }

    fn compact(&mut self, latest: u32, keep: usize) {
        let cutoff = i64::from(latest) - keep as i64;
        self.records.retain(|k, _| i64::from(k.epoch) > cutoff);
    }

    /// Rewrites every record without `party`'s columns.
    pub fn remove_party(&mut self, party: PartyId) -> Result<()> {
        let slice = self
            .slice_of(party)
            .ok_or_else(|| Error::Request(format!("party {party} has no slice in the store")))?;
        if self.layout.len() == 1 {
            return Err(Error::Request(format!(
                "party {party} is the only contributor; nothing would remain"
            )));
        }
        let cols: Vec<usize> = slice.range().collect();
        for rec in self.records.values_mut() {
            rec.concat = rec.concat.drop_columns(&cols)?;
        }
        let widths: Vec<(PartyId, usize)> = self
            .layout
            .iter()
            .filter(|s| s.party != party)
            .map(|s| (s.party, s.width))
            .collect();
        self.layout = layout_from_widths(&widths);
        Ok(())
    }

    /// Deletes the rows of the given samples everywhere; records left empty
    /// are dropped. Returns the number of rows removed.
    pub fn remove_samples(&mut self, targets: &BTreeSet<SampleId>) -> Result<usize> {
        let mut removed = 0;
        let mut emptied = Vec::new();
        for (key, rec) in self.records.iter_mut() {
            let keep: Vec<usize> = (0..rec.sample_ids.len())
                .filter(|&i| !targets.contains(&rec.sample_ids[i]))
                .collect();
            removed += rec.sample_ids.len() - keep.len();
            if keep.is_empty() {
                emptied.push(*key);
            } else if keep.len() < rec.sample_ids.len() {
                rec.concat = rec.concat.select_rows(&keep)?;
                rec.sample_ids = keep.iter().map(|&i| rec.sample_ids[i]).collect();
            }
        }
        for key in emptied {
            self.records.remove(&key);
        }
        Ok(removed)
    }

    pub fn contains_sample(&self, id: SampleId) -> bool {
        self.records.values().any(|r| r.sample_ids.contains(&id))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&STORE_VERSION.to_le_bytes())?;
        w.write_all(&(self.layout.len() as u32).to_le_bytes())?;
        for s in &self.layout {
            w.write_all(&s.party.0.to_le_bytes())?;
            w.write_all(&(s.width as u32).to_le_bytes())?;
        }
        w.write_all(&self.batch_size.to_le_bytes())?;
        for (key, rec) in &self.records {
            w.write_all(&key.epoch.to_le_bytes())?;
            w.write_all(&key.batch.to_le_bytes())?;
            w.write_all(&(rec.sample_ids.len() as u32).to_le_bytes())?;
            for id in &rec.sample_ids {
                w.write_all(&id.0.to_le_bytes())?;
            }
            for v in rec.concat.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Storage("not an embedding store file".into()));
        }
        let version = read_u32(r, "version")?;
        if version != STORE_VERSION {
            return Err(Error::Storage(format!("unsupported version {version}")));
        }
        let k = read_u32(r, "party count")? as usize;
        let mut widths = Vec::with_capacity(k);
        for _ in 0..k {
            let party = PartyId(read_u32(r, "party id")?);
            let width = read_u32(r, "party width")? as usize;
            widths.push((party, width));
        }
        let layout = layout_from_widths(&widths);
        let width: usize = layout.iter().map(|s| s.width).sum();
        let batch_size = read_u32(r, "batch size")?;

        let mut records = BTreeMap::new();
        loop {
            let mut head = [0u8; 4];
            match r.read(&mut head)? {
                0 => break,
                n if n < 4 => read_exact(r, &mut head[n..], "record header")?,
                _ => {}
            }
            let epoch = u32::from_le_bytes(head);
            let batch = read_u32(r, "batch index")?;
            let rows = read_u32(r, "row count")? as usize;
            let mut ids = Vec::with_capacity(rows);
            for _ in 0..rows {
                ids.push(SampleId(read_u64(r, "sample id")?));
            }
            let mut data = Vec::with_capacity(rows * width);
            for _ in 0..rows * width {
                let mut b = [0u8; 8];
                read_exact(r, &mut b, "embedding value")?;
                data.push(f64::from_le_bytes(b));
            }
            let concat = DenseMatrix::new(rows, width, data)?;
            records.insert(
                BatchKey { epoch, batch },
                StoredBatch {
                    concat,
                    sample_ids: ids,
                },
            );
        }
        if !records.is_empty() {
            check_layout(&layout, width)?;
        }
        Ok(Self {
            batch_size,
            layout,
            records,
            retain_epochs: None,
        })
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Storage(format!("truncated file while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_party_store() -> EmbeddingStore {
        let layout = layout_from_widths(&[(PartyId(0), 8), (PartyId(1), 8), (PartyId(2), 8)]);
        let mut store = EmbeddingStore::new(4);
        for epoch in 1..=2 {
            for batch in 0..2 {
                let concat = DenseMatrix::from_fn(3, 24, |r, c| {
                    (epoch * 1000 + batch * 100 + r * 24 + c) as f64 * 0.5
                });
                let ids = (0..3).map(|r| SampleId((batch * 3 + r) as u64)).collect();
                store
                    .put(BatchKey::new(epoch, batch), concat, &layout, ids)
                    .unwrap();
            }
        }
        store
    }

    #[test]
    fn store_then_read() {
        let store = three_party_store();
        let rec = store.get(BatchKey::new(2, 1)).unwrap();
        assert_eq!(rec.concat.get(0, 0), (2100.0) * 0.5);
        assert_eq!(store.len(), 4);
    }

    #[test]
    fn remove_party_shrinks_width_and_deletes_columns() {
        let mut store = three_party_store();
        let original = store.clone();
        store.remove_party(PartyId(1)).unwrap();
        assert_eq!(store.width(), 16);
        assert!(store.slice_of(PartyId(1)).is_none());
        for (key, rec) in store.records() {
            let orig = original.get(*key).unwrap();
            let expected = orig.concat.drop_columns(&(8..16).collect::<Vec<_>>()).unwrap();
            assert_eq!(rec.concat, expected);
        }
        assert_eq!(store.layout()[1].start, 8);
        assert!(store.remove_party(PartyId(1)).is_err());
    }

    #[test]
    fn mismatched_layout_is_rejected() {
        let mut store = three_party_store();
        let other = layout_from_widths(&[(PartyId(0), 12), (PartyId(1), 12)]);
        let err = store.put(
            BatchKey::new(3, 0),
            DenseMatrix::zeros(1, 24),
            &other,
            vec![SampleId(0)],
        );
        assert!(matches!(err, Err(Error::Protocol(_))));
        let gap = [PartySlice {
            party: PartyId(0),
            start: 1,
            width: 23,
        }];
        assert!(check_layout(&gap, 24).is_err());
    }

    #[test]
    fn retention_keeps_recent_epochs() {
        let layout = layout_from_widths(&[(PartyId(0), 1)]);
        let mut store = EmbeddingStore::new(1).with_retention(Some(2));
        for e in 1..=5 {
            store
                .put(BatchKey::new(e, 0), DenseMatrix::zeros(1, 1), &layout, vec![SampleId(0)])
                .unwrap();
        }
        assert_eq!(store.epochs().into_iter().collect::<Vec<_>>(), vec![4, 5]);
    }

    #[test]
    fn remove_samples_drops_rows_and_empty_records() {
        let mut store = three_party_store();
        let targets: BTreeSet<_> = [0u64, 1, 2, 4].into_iter().map(SampleId).collect();
        let removed = store.remove_samples(&targets).unwrap();
        assert_eq!(removed, 8);
        assert_eq!(store.len(), 2);
        assert!(!store.contains_sample(SampleId(4)));
        assert!(store.contains_sample(SampleId(3)));
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let mut store = three_party_store();
        store.remove_party(PartyId(0)).unwrap();
        let mut bytes = Vec::new();
        store.write_to(&mut bytes).unwrap();
        let back = EmbeddingStore::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, store);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, bytes);

        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            EmbeddingStore::read_from(&mut bytes.as_slice()),
            Err(Error::Storage(_))
        ));
    }
}
