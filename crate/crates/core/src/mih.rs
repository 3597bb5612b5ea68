//! Multi-index hashing over 256-bit descriptors.
//!
//! Each of the `t` tables is addressed by one `256 / t`-bit substring of a
//! descriptor and holds a bounded bucket of point ids per address. Buckets
//! keep the `N` most recently inserted ids, most recent first; inserting an
//! id that is already resident moves it to the front.
//!
//! Queries are exact-match lookups, one per table in the queried subset, and
//! never mutate the index apart from an atomic lookup counter. Inserts take
//! `&mut self`, so the single-writer / multi-reader contract falls out of the
//! borrow rules.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::descriptor::{BinaryDescriptor, SubstringValue, DESCRIPTOR_BITS};
use crate::error::MihError;

/// Caller-assigned id of a map point.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PointId(pub u64);

impl fmt::Display for PointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Substrings at most this wide get a dense bucket array.
const DENSE_MAX_BITS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MihConfig {
    pub table_count: usize,
    pub bucket_capacity: usize,
}

impl Default for MihConfig {
    fn default() -> Self {
        Self {
            table_count: 32,
            bucket_capacity: 10,
        }
    }
}

impl MihConfig {
    pub fn new(table_count: usize, bucket_capacity: usize) -> Result<Self, MihError> {
        let cfg = Self {
            table_count,
            bucket_capacity,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), MihError> {
        if self.table_count == 0 || self.table_count > DESCRIPTOR_BITS {
            return Err(MihError::TableCount(self.table_count));
        }
        if self.bucket_capacity == 0 {
            return Err(MihError::BucketCapacity);
        }
        Ok(())
    }

    pub fn substring_bits(&self) -> usize {
        DESCRIPTOR_BITS / self.table_count
    }

    /// Descriptor bits not covered by any substring.
    pub fn dead_bits(&self) -> usize {
        DESCRIPTOR_BITS - self.table_count * self.substring_bits()
    }

    /// Upper bound on stored entries, `t * 2^bits * N`.
    pub fn max_entries(&self) -> f64 {
        self.table_count as f64
            * 2f64.powi(self.substring_bits() as i32)
            * self.bucket_capacity as f64
    }
}

/// What happened in one table during an insert.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableInsert {
    Inserted,
    MovedToFront,
    /// Inserted, and the oldest resident id fell off the back.
    Evicted(PointId),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InsertReport {
    pub per_table: Vec<TableInsert>,
}

impl InsertReport {
    pub fn evicted(&self) -> impl Iterator<Item = (usize, PointId)> + '_ {
        self.per_table.iter().enumerate().filter_map(|(i, r)| match r {
            TableInsert::Evicted(id) => Some((i, *id)),
            _ => None,
        })
    }
}

/// Most recent id first; never longer than the configured capacity.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Bucket {
    entries: Vec<PointId>,
}

impl Bucket {
    pub fn entries(&self) -> &[PointId] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: PointId) -> bool {
        self.entries.contains(&id)
    }

    fn push_front(&mut self, id: PointId, capacity: usize) -> TableInsert {
        if let Some(pos) = self.entries.iter().position(|&e| e == id) {
            self.entries[..=pos].rotate_right(1);
            return TableInsert::MovedToFront;
        }
        let evicted = if self.entries.len() >= capacity {
            self.entries.pop()
        } else {
            None
        };
        self.entries.insert(0, id);
        match evicted {
            Some(old) => TableInsert::Evicted(old),
            None => TableInsert::Inserted,
        }
    }
}

#[derive(Clone, Debug)]
enum Table {
    Dense(Vec<Bucket>),
    Sparse(BTreeMap<SubstringValue, Bucket>),
}

impl Table {
    fn new(bits: usize) -> Self {
        if bits <= DENSE_MAX_BITS {
            Table::Dense(vec![Bucket::default(); 1 << bits])
        } else {
            Table::Sparse(BTreeMap::new())
        }
    }

    fn bucket(&self, addr: &SubstringValue) -> Option<&Bucket> {
        match self {
            // dense tables only ever see values below 2^8
            Table::Dense(b) => b.get(addr.words()[0] as usize),
            Table::Sparse(m) => m.get(addr),
        }
    }

    fn bucket_mut(&mut self, addr: SubstringValue) -> &mut Bucket {
        match self {
            Table::Dense(b) => &mut b[addr.words()[0] as usize],
            Table::Sparse(m) => m.entry(addr).or_default(),
        }
    }

    fn occupied(&self) -> Box<dyn Iterator<Item = (SubstringValue, &Bucket)> + '_> {
        match self {
            Table::Dense(b) => Box::new(
                b.iter()
                    .enumerate()
                    .filter(|(_, b)| !b.is_empty())
                    .map(|(i, b)| (SubstringValue::from_u64(i as u64), b)),
            ),
            Table::Sparse(m) => Box::new(m.iter().map(|(k, b)| (*k, b))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MihStats {
    /// Table-level insertions (`t` per point insert).
    pub table_inserts: u64,
    /// Table-level exact-match lookups.
    pub table_lookups: u64,
    pub evictions: u64,
    pub moved_to_front: u64,
    pub occupied_buckets: u64,
    pub stored_entries: u64,
    pub dead_bits: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct QueryResult {
    pub union_ids: BTreeSet<PointId>,
    /// Bucket contents per table, front first; empty for tables not queried.
    pub per_table_ids: Vec<Vec<PointId>>,
}

impl QueryResult {
    pub fn table_contains(&self, table: usize, id: PointId) -> bool {
        self.per_table_ids
            .get(table)
            .is_some_and(|ids| ids.contains(&id))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BatchQuery {
    /// Union over every descriptor's result.
    pub aggregated: BTreeSet<PointId>,
    pub results: Vec<QueryResult>,
}

/// One live bucket entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DumpRecord {
    pub table_index: usize,
    pub bucket_address: SubstringValue,
    pub position_from_front: usize,
    pub point_id: PointId,
}

#[derive(Debug)]
pub struct MihIndex {
    config: MihConfig,
    tables: Vec<Table>,
    table_inserts: u64,
    evictions: u64,
    moved_to_front: u64,
    occupied_buckets: u64,
    stored_entries: u64,
    table_lookups: AtomicU64,
}

impl Clone for MihIndex {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            tables: self.tables.clone(),
            table_inserts: self.table_inserts,
            evictions: self.evictions,
            moved_to_front: self.moved_to_front,
            occupied_buckets: self.occupied_buckets,
            stored_entries: self.stored_entries,
            table_lookups: AtomicU64::new(self.table_lookups.load(Ordering::Relaxed)),
        }
    }
}

impl MihIndex {
    pub fn new(config: MihConfig) -> Result<Self, MihError> {
        config.validate()?;
        let bits = config.substring_bits();
        Ok(Self {
            config,
            tables: (0..config.table_count).map(|_| Table::new(bits)).collect(),
            table_inserts: 0,
            evictions: 0,
            moved_to_front: 0,
            occupied_buckets: 0,
            stored_entries: 0,
            table_lookups: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &MihConfig {
        &self.config
    }

    pub fn table_count(&self) -> usize {
        self.config.table_count
    }

    /// Inserts `id` at the front of its bucket in every table.
    pub fn insert(&mut self, id: PointId, descriptor: &BinaryDescriptor) -> InsertReport {
        let t = self.config.table_count;
        let cap = self.config.bucket_capacity;
        let mut per_table = Vec::with_capacity(t);
        for (i, table) in self.tables.iter_mut().enumerate() {
            let bucket = table.bucket_mut(descriptor.substring(i, t));
            let was_empty = bucket.is_empty();
            let outcome = bucket.push_front(id, cap);
            if was_empty {
                self.occupied_buckets += 1;
            }
            match outcome {
                TableInsert::Inserted => self.stored_entries += 1,
                TableInsert::MovedToFront => self.moved_to_front += 1,
                TableInsert::Evicted(_) => self.evictions += 1,
            }
            per_table.push(outcome);
        }
        self.table_inserts += t as u64;
        InsertReport { per_table }
    }

    /// Sorted, deduplicated table list; `None` means every table.
    pub fn resolve_subset(&self, subset: Option<&[usize]>) -> Result<Vec<usize>, MihError> {
        let t = self.config.table_count;
        match subset {
            None => Ok((0..t).collect()),
            Some(s) => {
                let mut v = s.to_vec();
                v.sort_unstable();
                v.dedup();
                if let Some(&bad) = v.iter().find(|&&i| i >= t) {
                    return Err(MihError::TableIndex {
                        index: bad,
                        tables: t,
                    });
                }
                Ok(v)
            }
        }
    }

    pub fn query(
        &self,
        descriptor: &BinaryDescriptor,
        subset: Option<&[usize]>,
    ) -> Result<QueryResult, MihError> {
        let tables = self.resolve_subset(subset)?;
        Ok(self.query_resolved(descriptor, &tables))
    }

    fn query_resolved(&self, descriptor: &BinaryDescriptor, tables: &[usize]) -> QueryResult {
        let t = self.config.table_count;
        let mut per_table_ids = vec![Vec::new(); t];
        let mut union_ids = BTreeSet::new();
        for &i in tables {
            if let Some(bucket) = self.tables[i].bucket(&descriptor.substring(i, t)) {
                per_table_ids[i].extend_from_slice(bucket.entries());
                union_ids.extend(bucket.entries().iter().copied());
            }
        }
        self.table_lookups
            .fetch_add(tables.len() as u64, Ordering::Relaxed);
        QueryResult {
            union_ids,
            per_table_ids,
        }
    }

    /// Queries every descriptor of a frame and aggregates the union.
    pub fn batch_query(
        &self,
        descriptors: &[BinaryDescriptor],
        subset: Option<&[usize]>,
    ) -> Result<BatchQuery, MihError> {
        let tables = self.resolve_subset(subset)?;
        let mut out = BatchQuery::default();
        for d in descriptors {
            let r = self.query_resolved(d, &tables);
            out.aggregated.extend(r.union_ids.iter().copied());
            out.results.push(r);
        }
        Ok(out)
    }

    pub fn bucket(&self, table: usize, address: &SubstringValue) -> Option<&Bucket> {
        self.tables.get(table)?.bucket(address)
    }

    pub fn stats(&self) -> MihStats {
        MihStats {
            table_inserts: self.table_inserts,
            table_lookups: self.table_lookups.load(Ordering::Relaxed),
            evictions: self.evictions,
            moved_to_front: self.moved_to_front,
            occupied_buckets: self.occupied_buckets,
            stored_entries: self.stored_entries,
            dead_bits: self.config.dead_bits(),
        }
    }

    /// Every live entry, ordered by table, address, then position.
    pub fn dump(&self) -> Vec<DumpRecord> {
        let mut out = Vec::new();
        for (ti, table) in self.tables.iter().enumerate() {
            for (addr, bucket) in table.occupied() {
                for (pos, &id) in bucket.entries().iter().enumerate() {
                    out.push(DumpRecord {
                        table_index: ti,
                        bucket_address: addr,
                        position_from_front: pos,
                        point_id: id,
                    });
                }
            }
        }
        out
    }

    pub fn write_dump_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["table_index", "bucket_address", "position_from_front", "point_id"])?;
        for r in self.dump() {
            w.write_record([
                r.table_index.to_string(),
                r.bucket_address.to_string(),
                r.position_from_front.to_string(),
                r.point_id.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Brute-force reference for [`MihIndex::query`]: scans every dumped entry
/// and keeps ids whose recorded address equals the query's substring in a
/// queried table. Substrings are rebuilt bit by bit so this path shares no
/// extraction code with the index.
pub fn oracle_query(
    dump: &[DumpRecord],
    config: &MihConfig,
    descriptor: &BinaryDescriptor,
    subset: &[usize],
) -> BTreeSet<PointId> {
    let width = DESCRIPTOR_BITS / config.table_count;
    let address = |table: usize| {
        let mut words = [0u64; 4];
        for j in 0..width {
            if descriptor.bit(table * width + j) {
                words[j / 64] |= 1 << (j % 64);
            }
        }
        SubstringValue::from_words(words)
    };
    let wanted: BTreeMap<usize, SubstringValue> =
        subset.iter().map(|&ti| (ti, address(ti))).collect();
    dump.iter()
        .filter(|r| wanted.get(&r.table_index) == Some(&r.bucket_address))
        .map(|r| r.point_id)
        .collect()
}
