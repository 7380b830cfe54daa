use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ActivationRecord, DumpSchema, LayerSchema};
use crate::error::{Error, Result};
use crate::tensor::{encode_tensor_into, read_tensor, Tensor3};

pub const DUMP_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const DEFAULT_SHARD_BYTES: u64 = 64 << 20;
const RECORD_PREFIX_LEN: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub image_id: u32,
    pub class_label: u32,
    /// Index into `shards`.
    pub shard: u32,
    /// Byte offset of the image's first record within its shard.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub file: String,
    pub crc32: u32,
    pub record_count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub format_version: u32,
    pub model_name: String,
    pub classes: Vec<String>,
    pub layers: Vec<LayerSchema>,
    pub images: Vec<ImageEntry>,
    pub shards: Vec<ShardEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpSummary {
    pub images: usize,
    pub layers: usize,
    pub records: u64,
    pub shards: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpMetadata {
    pub model_name: String,
    pub classes: Vec<String>,
    pub layers: Vec<LayerSchema>,
    pub image_count: usize,
    /// Content hash of the manifest; shard checksums make it cover the data too.
    pub dump_id: String,
}

/// Counts [`ImageRecords`] batches currently alive and remembers the peak
/// number of records held at once.
#[derive(Debug, Default)]
pub struct LiveRecordProbe {
    live: AtomicUsize,
    peak: AtomicUsize,
}

impl LiveRecordProbe {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn live(&self) -> usize {
        self.live.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    fn acquire(self: &Arc<Self>, n: usize) -> LiveGuard {
        let now = self.live.fetch_add(n, Ordering::SeqCst) + n;
        self.peak.fetch_max(now, Ordering::SeqCst);
        LiveGuard {
            probe: Arc::clone(self),
            n,
        }
    }
}

#[derive(Debug)]
struct LiveGuard {
    probe: Arc<LiveRecordProbe>,
    n: usize,
}

impl Drop for LiveGuard {
    fn drop(&mut self) {
        self.probe.live.fetch_sub(self.n, Ordering::SeqCst);
    }
}

/// All records of one image, in ascending layer order.
#[derive(Debug)]
pub struct ImageRecords {
    pub image_id: u32,
    pub class_label: u32,
    pub records: Vec<ActivationRecord>,
    _guard: Option<LiveGuard>,
}

impl ImageRecords {
    /// Groups records that were produced in memory rather than read back.
    pub fn from_records(
        image_id: u32,
        class_label: u32,
        mut records: Vec<ActivationRecord>,
    ) -> Self {
        records.sort_by_key(|r| r.layer_id);
        Self {
            image_id,
            class_label,
            records,
            _guard: None,
        }
    }

    pub fn layer(&self, layer_id: u16) -> Option<&ActivationRecord> {
        self.records.iter().find(|r| r.layer_id == layer_id)
    }
}

impl PartialEq for ImageRecords {
    fn eq(&self, other: &Self) -> bool {
        self.image_id == other.image_id
            && self.class_label == other.class_label
            && self.records == other.records
    }
}

// ---------------------------------------------------------------------------
// Writer
// ---------------------------------------------------------------------------

struct OpenShard {
    name: String,
    file: BufWriter<File>,
    hasher: crc32fast::Hasher,
    bytes: u64,
    records: u64,
}

struct PendingImage {
    image_id: u32,
    class_label: u32,
    records: Vec<ActivationRecord>,
}

/// Streams records into a dump directory.
///
/// Records of one image must arrive back to back; images may come in any
/// order. The manifest lists images sorted by id.
pub struct DumpWriter {
    dir: PathBuf,
    schema: DumpSchema,
    max_shard_bytes: u64,
    shard: Option<OpenShard>,
    pending: Option<PendingImage>,
    seen: HashSet<(u32, u16)>,
    flushed_images: HashSet<u32>,
    images: Vec<ImageEntry>,
    shards: Vec<ShardEntry>,
    records: u64,
}

impl DumpWriter {
    pub fn create(dir: impl AsRef<Path>, schema: DumpSchema) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        // Stale shards from an earlier dump in the same directory would
        // otherwise linger next to the new manifest.
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            let name = path
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default();
            if name == MANIFEST_FILE || (name.starts_with("shard-") && name.ends_with(".bin")) {
                std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
            }
        }
        for (i, l) in schema.layers.iter().enumerate() {
            if l.layer_id as usize != i {
                return Err(Error::Schema(format!(
                    "layer ids must be 0..n in order; position {i} holds {}",
                    l.layer_id
                )));
            }
        }
        Ok(Self {
            dir,
            schema,
            max_shard_bytes: DEFAULT_SHARD_BYTES,
            shard: None,
            pending: None,
            seen: HashSet::new(),
            flushed_images: HashSet::new(),
            images: Vec::new(),
            shards: Vec::new(),
            records: 0,
        })
    }

    /// Caps shard size; an image never spans two shards.
    pub fn with_max_shard_bytes(mut self, bytes: u64) -> Self {
        self.max_shard_bytes = bytes.max(1);
        self
    }

    pub fn push(&mut self, record: ActivationRecord) -> Result<()> {
        let layer = self
            .schema
            .layers
            .get(record.layer_id as usize)
            .ok_or_else(|| {
                Error::Schema(format!("record names unknown layer {}", record.layer_id))
            })?;
        if record.feature_maps.shape() != layer.shape() {
            return Err(Error::Schema(format!(
                "image {} layer {}: feature maps {} but the layer declares {}",
                record.image_id,
                record.layer_id,
                record.feature_maps.shape(),
                layer.shape()
            )));
        }
        if record.class_label as usize >= self.schema.classes.len() {
            return Err(Error::Schema(format!(
                "image {} has class label {} but only {} classes exist",
                record.image_id,
                record.class_label,
                self.schema.classes.len()
            )));
        }
        if let Some(&v) = record.feature_maps.values().iter().find(|v| **v < 0.0) {
            return Err(Error::NegativeActivation {
                image_id: record.image_id,
                layer_id: record.layer_id,
                value: v,
            });
        }
        if !self.seen.insert((record.image_id, record.layer_id)) {
            return Err(Error::DuplicateRecord {
                image_id: record.image_id,
                layer_id: record.layer_id,
            });
        }

        match &mut self.pending {
            Some(p) if p.image_id == record.image_id => {
                if p.class_label != record.class_label {
                    return Err(Error::Schema(format!(
                        "image {} carries labels {} and {}",
                        record.image_id, p.class_label, record.class_label
                    )));
                }
                p.records.push(record);
            }
            _ => {
                if self.flushed_images.contains(&record.image_id) {
                    return Err(Error::Schema(format!(
                        "records for image {} are not contiguous in the stream",
                        record.image_id
                    )));
                }
                self.flush_pending()?;
                self.pending = Some(PendingImage {
                    image_id: record.image_id,
                    class_label: record.class_label,
                    records: vec![record],
                });
            }
        }
        Ok(())
    }

    fn flush_pending(&mut self) -> Result<()> {
        let Some(mut pending) = self.pending.take() else {
            return Ok(());
        };
        pending.records.sort_by_key(|r| r.layer_id);
        let mut buf = Vec::new();
        for r in &pending.records {
            buf.extend_from_slice(&r.image_id.to_le_bytes());
            buf.extend_from_slice(&r.layer_id.to_le_bytes());
            encode_tensor_into(&mut buf, &r.feature_maps)?;
        }

        let full = self
            .shard
            .as_ref()
            .is_some_and(|s| s.records > 0 && s.bytes + buf.len() as u64 > self.max_shard_bytes);
        if full {
            self.close_shard()?;
        }
        if self.shard.is_none() {
            let name = format!("shard-{:05}.bin", self.shards.len());
            let path = self.dir.join(&name);
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            self.shard = Some(OpenShard {
                name,
                file: BufWriter::new(file),
                hasher: crc32fast::Hasher::new(),
                bytes: 0,
                records: 0,
            });
        }
        let shard = self.shard.as_mut().expect("shard opened above");
        let path = self.dir.join(&shard.name);
        shard
            .file
            .write_all(&buf)
            .map_err(|e| Error::io(&path, e))?;
        shard.hasher.update(&buf);
        self.images.push(ImageEntry {
            image_id: pending.image_id,
            class_label: pending.class_label,
            shard: self.shards.len() as u32,
            offset: shard.bytes,
        });
        shard.bytes += buf.len() as u64;
        shard.records += pending.records.len() as u64;
        self.records += pending.records.len() as u64;
        self.flushed_images.insert(pending.image_id);
        Ok(())
    }

    fn close_shard(&mut self) -> Result<()> {
        if let Some(mut s) = self.shard.take() {
            let path = self.dir.join(&s.name);
            s.file.flush().map_err(|e| Error::io(&path, e))?;
            self.shards.push(ShardEntry {
                file: s.name,
                crc32: s.hasher.finalize(),
                record_count: s.records,
            });
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<DumpSummary> {
        self.flush_pending()?;
        self.close_shard()?;
        self.images.sort_by_key(|e| e.image_id);
        let manifest = DumpManifest {
            format_version: DUMP_FORMAT_VERSION,
            model_name: self.schema.model_name.clone(),
            classes: self.schema.classes.clone(),
            layers: self.schema.layers.clone(),
            images: std::mem::take(&mut self.images),
            shards: std::mem::take(&mut self.shards),
        };
        let path = self.dir.join(MANIFEST_FILE);
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(DumpSummary {
            images: manifest.images.len(),
            layers: manifest.layers.len(),
            records: self.records,
            shards: manifest.shards.len(),
        })
    }
}

/// Writes `records` to a fresh dump in `dir`.
pub fn write_dump(
    dir: impl AsRef<Path>,
    schema: DumpSchema,
    records: impl IntoIterator<Item = ActivationRecord>,
) -> Result<DumpSummary> {
    let mut w = DumpWriter::create(dir, schema)?;
    for r in records {
        w.push(r)?;
    }
    w.finish()
}

// ---------------------------------------------------------------------------
// Reader
// ---------------------------------------------------------------------------

/// Read access to a validated dump. Opening checks every shard's checksum
/// and record count; records are then streamed one image at a time.
#[derive(Debug, Clone)]
pub struct DumpReader {
    dir: PathBuf,
    manifest: DumpManifest,
    dump_id: String,
    probe: Option<Arc<LiveRecordProbe>>,
}

impl DumpReader {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(MANIFEST_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DumpManifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::parse("dump manifest", e.to_string()))?;
        if manifest.format_version != DUMP_FORMAT_VERSION {
            return Err(Error::parse(
                "dump manifest",
                format!("unsupported format_version {}", manifest.format_version),
            ));
        }
        for (i, l) in manifest.layers.iter().enumerate() {
            if l.layer_id as usize != i {
                return Err(Error::parse(
                    "dump manifest",
                    format!("layer {i} has id {}", l.layer_id),
                ));
            }
        }
        let mut ids = HashSet::new();
        for e in &manifest.images {
            if !ids.insert(e.image_id) {
                return Err(Error::parse(
                    "dump manifest",
                    format!("image {} listed twice", e.image_id),
                ));
            }
            if e.shard as usize >= manifest.shards.len() {
                return Err(Error::parse(
                    "dump manifest",
                    format!(
                        "image {} points at missing shard index {}",
                        e.image_id, e.shard
                    ),
                ));
            }
            if e.class_label as usize >= manifest.classes.len() {
                return Err(Error::parse(
                    "dump manifest",
                    format!("image {} has unknown class {}", e.image_id, e.class_label),
                ));
            }
        }
        for shard in &manifest.shards {
            verify_shard(&dir, shard)?;
        }
        let dump_id = hex::encode(&Sha256::digest(&bytes)[..8]);
        Ok(Self {
            dir,
            manifest,
            dump_id,
            probe: None,
        })
    }

    /// Attaches a probe that counts records held by live [`ImageRecords`].
    pub fn with_probe(mut self, probe: Arc<LiveRecordProbe>) -> Self {
        self.probe = Some(probe);
        self
    }

    pub fn manifest(&self) -> &DumpManifest {
        &self.manifest
    }

    pub fn dump_id(&self) -> &str {
        &self.dump_id
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn classes(&self) -> &[String] {
        &self.manifest.classes
    }

    pub fn layers(&self) -> &[LayerSchema] {
        &self.manifest.layers
    }

    pub fn images(&self) -> &[ImageEntry] {
        &self.manifest.images
    }

    pub fn metadata(&self) -> DumpMetadata {
        DumpMetadata {
            model_name: self.manifest.model_name.clone(),
            classes: self.manifest.classes.clone(),
            layers: self.manifest.layers.clone(),
            image_count: self.manifest.images.len(),
            dump_id: self.dump_id.clone(),
        }
    }

    pub fn schema(&self) -> DumpSchema {
        DumpSchema {
            model_name: self.manifest.model_name.clone(),
            classes: self.manifest.classes.clone(),
            layers: self.manifest.layers.clone(),
        }
    }

    /// `(image_id, class_label)` for every image in the dump.
    pub fn labels(&self) -> Vec<(u32, u32)> {
        self.manifest
            .images
            .iter()
            .map(|e| (e.image_id, e.class_label))
            .collect()
    }

    /// Streams every image in ascending id order.
    pub fn records(&self) -> RecordStream<'_> {
        self.stream(self.manifest.images.iter().collect())
    }

    /// Streams the listed images (ascending id order, unknown ids skipped).
    pub fn records_for<'a>(&'a self, ids: impl IntoIterator<Item = &'a u32>) -> RecordStream<'a> {
        let wanted: HashSet<u32> = ids.into_iter().copied().collect();
        self.stream(
            self.manifest
                .images
                .iter()
                .filter(|e| wanted.contains(&e.image_id))
                .collect(),
        )
    }

    fn stream<'a>(&'a self, entries: Vec<&'a ImageEntry>) -> RecordStream<'a> {
        RecordStream {
            reader: self,
            entries: entries.into_iter(),
            open: None,
        }
    }

    pub fn read_image(&self, image_id: u32) -> Result<ImageRecords> {
        let entry = self
            .manifest
            .images
            .iter()
            .find(|e| e.image_id == image_id)
            .ok_or_else(|| Error::Usage(format!("image {image_id} is not in the dump")))?;
        let mut open = None;
        self.load(entry, &mut open)
    }

    fn load(
        &self,
        entry: &ImageEntry,
        open: &mut Option<(u32, BufReader<File>, u64)>,
    ) -> Result<ImageRecords> {
        let shard = &self.manifest.shards[entry.shard as usize];
        let path = self.dir.join(&shard.file);
        if open.as_ref().map(|o| o.0) != Some(entry.shard) {
            let file = File::open(&path).map_err(|_| Error::MissingShard(path.clone()))?;
            let len = file.metadata().map_err(|e| Error::io(&path, e))?.len();
            *open = Some((entry.shard, BufReader::new(file), len));
        }
        let (_, reader, len) = open.as_mut().expect("opened above");
        let len = *len;
        reader
            .seek(SeekFrom::Start(entry.offset))
            .map_err(|e| Error::io(&path, e))?;
        let mut pos = entry.offset;
        let mut records: Vec<ActivationRecord> = Vec::new();
        while pos < len {
            let mut prefix = [0u8; RECORD_PREFIX_LEN];
            reader
                .read_exact(&mut prefix)
                .map_err(|e| Error::io(&path, e))?;
            let image_id = u32::from_le_bytes(prefix[..4].try_into().unwrap());
            if image_id != entry.image_id {
                break;
            }
            let layer_id = u16::from_le_bytes(prefix[4..].try_into().unwrap());
            let ctx = format!("{} image {image_id} layer {layer_id}", shard.file);
            let feature_maps = read_tensor(reader, &ctx)?;
            pos += (RECORD_PREFIX_LEN + feature_maps.encoded_len()) as u64;
            self.check_record(image_id, layer_id, &feature_maps, &records)?;
            records.push(ActivationRecord {
                image_id,
                class_label: entry.class_label,
                layer_id,
                feature_maps,
            });
        }
        if records.is_empty() {
            return Err(Error::parse(
                &shard.file,
                format!(
                    "no records at offset {} for image {}",
                    entry.offset, entry.image_id
                ),
            ));
        }
        records.sort_by_key(|r| r.layer_id);
        let guard = self.probe.as_ref().map(|p| p.acquire(records.len()));
        Ok(ImageRecords {
            image_id: entry.image_id,
            class_label: entry.class_label,
            records,
            _guard: guard,
        })
    }

    fn check_record(
        &self,
        image_id: u32,
        layer_id: u16,
        maps: &Tensor3,
        seen: &[ActivationRecord],
    ) -> Result<()> {
        let layer = self.manifest.layers.get(layer_id as usize).ok_or_else(|| {
            Error::Schema(format!(
                "image {image_id} has a record for unknown layer {layer_id}"
            ))
        })?;
        if maps.shape() != layer.shape() {
            return Err(Error::Schema(format!(
                "image {image_id} layer {layer_id}: stored maps {} but the layer declares {}",
                maps.shape(),
                layer.shape()
            )));
        }
        if seen.iter().any(|r| r.layer_id == layer_id) {
            return Err(Error::DuplicateRecord { image_id, layer_id });
        }
        if let Some(&value) = maps.values().iter().find(|v| **v < 0.0) {
            return Err(Error::NegativeActivation {
                image_id,
                layer_id,
                value,
            });
        }
        Ok(())
    }
}

/// Iterator over [`ImageRecords`], one image at a time.
pub struct RecordStream<'a> {
    reader: &'a DumpReader,
    entries: std::vec::IntoIter<&'a ImageEntry>,
    open: Option<(u32, BufReader<File>, u64)>,
}

impl Iterator for RecordStream<'_> {
    type Item = Result<ImageRecords>;

    fn next(&mut self) -> Option<Self::Item> {
        let entry = self.entries.next()?;
        Some(self.reader.load(entry, &mut self.open))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.entries.size_hint()
    }
}

fn verify_shard(dir: &Path, shard: &ShardEntry) -> Result<()> {
    let path = dir.join(&shard.file);
    let file = File::open(&path).map_err(|_| Error::MissingShard(path.clone()))?;
    let mut reader = BufReader::new(file);
    let mut hasher = crc32fast::Hasher::new();
    let mut buf = vec![0u8; 64 << 10];
    loop {
        let n = reader.read(&mut buf).map_err(|e| Error::io(&path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    let actual = hasher.finalize();
    if actual != shard.crc32 {
        return Err(Error::Checksum {
            shard: shard.file.clone(),
            expected: shard.crc32,
            actual,
        });
    }

    // Walk the record framing to confirm the count without holding payloads.
    reader
        .seek(SeekFrom::Start(0))
        .map_err(|e| Error::io(&path, e))?;
    let mut count = 0u64;
    let mut prefix = [0u8; RECORD_PREFIX_LEN];
    loop {
        match reader.read_exact(&mut prefix) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(Error::io(&path, e)),
        }
        let ctx = format!("{} record {count}", shard.file);
        let shape = crate::tensor::read_tensor_header(&mut reader, &ctx)?;
        let skip = 4 * shape.len() as i64;
        reader
            .seek_relative(skip)
            .map_err(|e| Error::io(&path, e))?;
        count += 1;
    }
    let pos = reader.stream_position().map_err(|e| Error::io(&path, e))?;
    let len = reader
        .get_ref()
        .metadata()
        .map_err(|e| Error::io(&path, e))?
        .len();
    if pos != len {
        return Err(Error::parse(
            &shard.file,
            "trailing bytes after the last record",
        ));
    }
    if count != shard.record_count {
        return Err(Error::parse(
            &shard.file,
            format!(
                "manifest declares {} records, shard holds {count}",
                shard.record_count
            ),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn schema(layers: &[(usize, usize, usize)], classes: usize) -> DumpSchema {
        DumpSchema {
            model_name: "test".into(),
            classes: (0..classes).map(|c| format!("c{c}")).collect(),
            layers: layers
                .iter()
                .enumerate()
                .map(|(i, &(f, h, w))| LayerSchema {
                    layer_id: i as u16,
                    filter_count: f,
                    height: h,
                    width: w,
                })
                .collect(),
        }
    }

    fn record(
        rng: &mut ChaCha8Rng,
        image_id: u32,
        class_label: u32,
        layer: &LayerSchema,
    ) -> ActivationRecord {
        ActivationRecord {
            image_id,
            class_label,
            layer_id: layer.layer_id,
            feature_maps: Tensor3::from_fn(layer.shape(), |_, _, _| rng.random_range(0.0f32..5.0))
                .unwrap(),
        }
    }

    #[test]
    fn single_record_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let s = schema(&[(3, 2, 2)], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = record(&mut rng, 7, 0, &s.layers[0]);
        let summary = write_dump(dir.path(), s, [r.clone()]).unwrap();
        assert_eq!(summary.images, 1);
        assert_eq!(summary.layers, 1);
        let reader = DumpReader::open(dir.path()).unwrap();
        let meta = reader.metadata();
        assert_eq!(meta.image_count, 1);
        assert_eq!(meta.layers[0].shape(), Shape3::new(3, 2, 2));
        let got: Vec<_> = reader.records().collect::<Result<_>>().unwrap();
        assert_eq!(got[0].records, vec![r]);
    }

    #[test]
    fn empty_dump() {
        let dir = tempfile::tempdir().unwrap();
        write_dump(dir.path(), schema(&[(2, 1, 1)], 2), []).unwrap();
        let reader = DumpReader::open(dir.path()).unwrap();
        assert_eq!(reader.metadata().image_count, 0);
        assert_eq!(reader.records().count(), 0);
    }

    #[test]
    fn duplicate_record_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let s = schema(&[(2, 2, 2)], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = record(&mut rng, 1, 0, &s.layers[0]);
        let err = write_dump(dir.path(), s, [r.clone(), r]).unwrap_err();
        assert!(matches!(
            err,
            Error::DuplicateRecord {
                image_id: 1,
                layer_id: 0
            }
        ));
    }

    #[test]
    fn schema_drift_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let s = schema(&[(2, 2, 2)], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let good = record(&mut rng, 1, 0, &s.layers[0]);
        let mut bad = record(&mut rng, 2, 0, &s.layers[0]);
        bad.feature_maps = Tensor3::zeros(Shape3::new(3, 2, 2));
        let err = write_dump(dir.path(), s, [good, bad]).unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "{err}");
    }

    #[test]
    fn interleaved_image_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let s = schema(&[(1, 1, 1), (1, 1, 1)], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a0 = record(&mut rng, 1, 0, &s.layers[0]);
        let b0 = record(&mut rng, 2, 0, &s.layers[0]);
        let a1 = record(&mut rng, 1, 0, &s.layers[1]);
        let err = write_dump(dir.path(), s, [a0, b0, a1]).unwrap_err();
        assert!(err.to_string().contains("not contiguous"), "{err}");
    }

    #[test]
    fn corrupted_shard_names_the_shard() {
        let dir = tempfile::tempdir().unwrap();
        let s = schema(&[(2, 3, 3)], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let recs: Vec<_> = (0..4)
            .map(|i| record(&mut rng, i, i % 2, &s.layers[0]))
            .collect();
        write_dump(dir.path(), s, recs).unwrap();
        let shard = dir.path().join("shard-00000.bin");
        let mut bytes = std::fs::read(&shard).unwrap();
        bytes[40] ^= 0x01;
        std::fs::write(&shard, bytes).unwrap();
        match DumpReader::open(dir.path()).unwrap_err() {
            Error::Checksum { shard, .. } => assert_eq!(shard, "shard-00000.bin"),
            other => panic!("expected checksum error, got {other}"),
        }
    }

    #[test]
    fn missing_shard() {
        let dir = tempfile::tempdir().unwrap();
        let s = schema(&[(1, 2, 2)], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        write_dump(
            dir.path(),
            s.clone(),
            [record(&mut rng, 0, 0, &s.layers[0])],
        )
        .unwrap();
        std::fs::remove_file(dir.path().join("shard-00000.bin")).unwrap();
        assert!(matches!(
            DumpReader::open(dir.path()),
            Err(Error::MissingShard(_))
        ));
    }

    #[test]
    fn negative_activation_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let s = schema(&[(1, 1, 2)], 1);
        let r = ActivationRecord {
            image_id: 5,
            class_label: 0,
            layer_id: 0,
            feature_maps: Tensor3::new(Shape3::new(1, 1, 2), vec![1.0, 2.0]).unwrap(),
        };
        write_dump(dir.path(), s, [r]).unwrap();
        // Patch the last value to -2.0 and fix up the checksum.
        let shard = dir.path().join("shard-00000.bin");
        let mut bytes = std::fs::read(&shard).unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&(-2.0f32).to_le_bytes());
        std::fs::write(&shard, &bytes).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let mut m: DumpManifest = serde_json::from_slice(&std::fs::read(&mpath).unwrap()).unwrap();
        m.shards[0].crc32 = crc32fast::hash(&bytes);
        std::fs::write(&mpath, serde_json::to_vec(&m).unwrap()).unwrap();

        let reader = DumpReader::open(dir.path()).unwrap();
        let err = reader.read_image(5).unwrap_err();
        assert!(
            matches!(
                err,
                Error::NegativeActivation {
                    image_id: 5,
                    layer_id: 0,
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn writer_rejects_negative_activation() {
        let dir = tempfile::tempdir().unwrap();
        let s = schema(&[(1, 1, 1)], 1);
        let r = ActivationRecord {
            image_id: 0,
            class_label: 0,
            layer_id: 0,
            feature_maps: Tensor3::new(Shape3::new(1, 1, 1), vec![-0.5]).unwrap(),
        };
        assert!(matches!(
            write_dump(dir.path(), s, [r]),
            Err(Error::NegativeActivation { .. })
        ));
    }

    #[test]
    fn round_trip_random_records_across_shards() {
        let dir = tempfile::tempdir().unwrap();
        let s = schema(&[(4, 3, 3), (2, 2, 2)], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut recs = Vec::new();
        // 50 images x 2 layers, ids shuffled, layers written in reverse
        let mut ids: Vec<u32> = (0..50).map(|i| i * 3 + 1).collect();
        rand::seq::SliceRandom::shuffle(ids.as_mut_slice(), &mut rng);
        for &id in &ids {
            let label = id % 3;
            recs.push(record(&mut rng, id, label, &s.layers[1]));
            recs.push(record(&mut rng, id, label, &s.layers[0]));
        }
        let mut w = DumpWriter::create(dir.path(), s)
            .unwrap()
            .with_max_shard_bytes(1000);
        for r in recs.clone() {
            w.push(r).unwrap();
        }
        let summary = w.finish().unwrap();
        assert!(summary.shards > 1);
        assert_eq!(summary.records, 100);

        let reader = DumpReader::open(dir.path()).unwrap();
        let mut got: Vec<ActivationRecord> = Vec::new();
        let mut last = None;
        for img in reader.records() {
            let img = img.unwrap();
            assert!(last < Some(img.image_id));
            last = Some(img.image_id);
            let layers: Vec<u16> = img.records.iter().map(|r| r.layer_id).collect();
            assert_eq!(layers, vec![0, 1]);
            got.extend(img.records.iter().cloned());
        }
        let key = |r: &ActivationRecord| (r.image_id, r.layer_id);
        recs.sort_by_key(key);
        got.sort_by_key(key);
        assert_eq!(got, recs);
    }

    #[test]
    fn streaming_holds_one_image_at_a_time() {
        let dir = tempfile::tempdir().unwrap();
        let s = schema(&[(2, 2, 2), (2, 2, 2), (1, 1, 1)], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut recs = Vec::new();
        for id in 0..20 {
            for l in &s.layers {
                recs.push(record(&mut rng, id, id % 2, l));
            }
        }
        write_dump(dir.path(), s, recs).unwrap();
        let probe = LiveRecordProbe::new();
        let reader = DumpReader::open(dir.path())
            .unwrap()
            .with_probe(probe.clone());
        let mut n = 0;
        for img in reader.records() {
            let img = img.unwrap();
            assert_eq!(probe.live(), 3);
            n += img.records.len();
        }
        assert_eq!(n, 60);
        assert_eq!(probe.live(), 0);
        assert_eq!(probe.peak(), 3);
    }

    #[test]
    fn dump_bytes_are_reproducible() {
        let s = schema(&[(2, 2, 2)], 2);
        let write = |dir: &Path| {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let recs: Vec<_> = (0..6)
                .map(|i| record(&mut rng, i, i % 2, &s.layers[0]))
                .collect();
            write_dump(dir, s.clone(), recs).unwrap();
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write(a.path());
        write(b.path());
        for f in [MANIFEST_FILE, "shard-00000.bin"] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap()
            );
        }
        assert_eq!(
            DumpReader::open(a.path()).unwrap().dump_id(),
            DumpReader::open(b.path()).unwrap().dump_id()
        );
    }
}
