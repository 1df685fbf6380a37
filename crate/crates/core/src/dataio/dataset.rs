//! `PCF1` embedding dataset files.
//!
//! ```text
//! header:  "PCF1" | version u32 | text_width u32 | image_width u32
//!          | sample_count u64 | labeled u8 | class_count u32
//!          | class_count × (len u32, utf8 name)
//! record:  id (len u32, utf8) | label u8 (0xFF = none)
//!          | 4 × (token_count u32, token_count × width × f32)
//! ```
//!
//! Sequences are stored in the order claim_image, claim_text, doc_image,
//! doc_text; image sequences use `image_width`, text sequences `text_width`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use super::wire::{put_f32s, put_str, put_u32, put_u64, WireReader};
use super::FormatError;
use crate::coattention::TokenSequence;
use crate::error::{Error, Result};
use crate::model::{Category, SampleEmbeddings, Source, CLASS_COUNT, MAX_TEXT_TOKENS};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: [u8; 4] = *b"PCF1";
pub const DATASET_VERSION: u32 = 1;
/// Label byte of an unlabeled sample.
pub const UNLABELED: u8 = 0xFF;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetHeader {
    pub version: u32,
    pub text_width: usize,
    pub image_width: usize,
    pub sample_count: u64,
    pub labeled: bool,
    pub class_names: Vec<String>,
}

impl DatasetHeader {
    pub fn new(text_width: usize, image_width: usize, sample_count: u64, labeled: bool) -> Self {
        Self {
            version: DATASET_VERSION,
            text_width,
            image_width,
            sample_count,
            labeled,
            class_names: Category::names(),
        }
    }

    pub fn width(&self, source: Source) -> usize {
        if source.is_text() {
            self.text_width
        } else {
            self.image_width
        }
    }

    /// Fails when the file's embedding widths differ from what a model expects.
    pub fn check_widths(&self, text_width: usize, image_width: usize) -> Result<()> {
        if (self.text_width, self.image_width) != (text_width, image_width) {
            return Err(FormatError::WidthMismatch {
                expected: (text_width, image_width),
                found: (self.text_width, self.image_width),
            }
            .into());
        }
        Ok(())
    }

    fn write(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&DATASET_MAGIC)?;
        put_u32(w, self.version)?;
        put_u32(w, self.text_width as u32)?;
        put_u32(w, self.image_width as u32)?;
        put_u64(w, self.sample_count)?;
        w.write_all(&[u8::from(self.labeled)])?;
        put_u32(w, self.class_names.len() as u32)?;
        for name in &self.class_names {
            put_str(w, name)?;
        }
        Ok(())
    }

    fn read<R: Read>(r: &mut WireReader<R>) -> std::result::Result<Self, FormatError> {
        let what = || "header".to_string();
        let magic: [u8; 4] = r.array(&what)?;
        if magic != DATASET_MAGIC {
            return Err(FormatError::BadMagic {
                expected: DATASET_MAGIC,
                found: magic,
            });
        }
        let version = r.u32(&what)?;
        if version != DATASET_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let text_width = r.u32(&what)? as usize;
        let image_width = r.u32(&what)? as usize;
        if text_width == 0 || image_width == 0 {
            return Err(FormatError::Header(
                "embedding widths must be positive".into(),
            ));
        }
        let sample_count = r.u64(&what)?;
        let labeled = match r.u8(&what)? {
            0 => false,
            1 => true,
            other => {
                return Err(FormatError::Header(format!(
                    "label flag must be 0 or 1, got {other}"
                )))
            }
        };
        let class_count = r.u32(&what)?;
        if class_count as usize != CLASS_COUNT {
            return Err(FormatError::Header(format!(
                "expected {CLASS_COUNT} classes, got {class_count}"
            )));
        }
        let mut class_names = Vec::with_capacity(CLASS_COUNT);
        for i in 0..CLASS_COUNT {
            class_names.push(r.string(&|| format!("class name {i}"))?);
        }
        if class_names != Category::names() {
            return Err(FormatError::Header(format!(
                "unrecognized class table {class_names:?}"
            )));
        }
        Ok(Self {
            version,
            text_width,
            image_width,
            sample_count,
            labeled,
            class_names,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<SampleEmbeddings<f32>>,
}

impl Dataset {
    /// Checks that every sample matches the widths and label presence.
    pub fn new(
        text_width: usize,
        image_width: usize,
        samples: Vec<SampleEmbeddings<f32>>,
    ) -> Result<Self> {
        let labeled = samples.first().is_none_or(|s| s.label.is_some());
        let header = DatasetHeader::new(text_width, image_width, samples.len() as u64, labeled);
        for (i, s) in samples.iter().enumerate() {
            check_sample(&header, i as u64, s)?;
        }
        Ok(Self { header, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Option<Vec<usize>> {
        self.samples
            .iter()
            .map(|s| s.label.map(Category::index))
            .collect()
    }

    pub fn write_to(&self, w: impl Write) -> Result<()> {
        let mut writer = DatasetWriter::new(w, self.header.clone())?;
        for s in &self.samples {
            writer.write_sample(s)?;
        }
        writer.finish()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let reader = DatasetReader::new(r)?;
        let header = reader.header().clone();
        let samples = reader.collect::<Result<Vec<_>>>()?;
        Ok(Self { header, samples })
    }
}

fn check_sample(header: &DatasetHeader, index: u64, s: &SampleEmbeddings<f32>) -> Result<()> {
    if header.labeled != s.label.is_some() {
        return Err(Error::InvalidInput(format!(
            "sample {index}: label presence differs from the rest of the dataset"
        )));
    }
    for source in Source::ALL {
        let seq = s.source(source);
        if seq.width() != header.width(source) {
            return Err(FormatError::WidthMismatch {
                expected: (header.text_width, header.image_width),
                found: if source.is_text() {
                    (seq.width(), header.image_width)
                } else {
                    (header.text_width, seq.width())
                },
            }
            .into());
        }
        if seq.has_padding() {
            return Err(Error::InvalidInput(format!(
                "sample {index}: padded sequences cannot be stored"
            )));
        }
        if source.is_text() && seq.len() > MAX_TEXT_TOKENS {
            return Err(FormatError::TokenCount {
                sample: index,
                source_name: source.name(),
                count: seq.len() as u32,
            }
            .into());
        }
    }
    Ok(())
}

/// Streams samples to a writer; the declared count must match what is
/// written before [`DatasetWriter::finish`].
pub struct DatasetWriter<W: Write> {
    inner: W,
    header: DatasetHeader,
    written: u64,
}

impl<W: Write> DatasetWriter<W> {
    pub fn new(mut inner: W, header: DatasetHeader) -> Result<Self> {
        header.write(&mut inner).map_err(FormatError::Io)?;
        Ok(Self {
            inner,
            header,
            written: 0,
        })
    }

    pub fn write_sample(&mut self, s: &SampleEmbeddings<f32>) -> Result<()> {
        if self.written >= self.header.sample_count {
            return Err(Error::InvalidInput(format!(
                "header declares {} samples",
                self.header.sample_count
            )));
        }
        check_sample(&self.header, self.written, s)?;
        let w = &mut self.inner;
        let io = |e| Error::Format(FormatError::Io(e));
        put_str(w, &s.id).map_err(io)?;
        let label = s.label.map_or(UNLABELED, |c| c.index() as u8);
        w.write_all(&[label]).map_err(io)?;
        for source in Source::ALL {
            let seq = s.source(source);
            put_u32(w, seq.len() as u32).map_err(io)?;
            put_f32s(w, seq.tokens().data().iter().copied()).map_err(io)?;
        }
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        if self.written != self.header.sample_count {
            return Err(Error::InvalidInput(format!(
                "header declares {} samples but {} were written",
                self.header.sample_count, self.written
            )));
        }
        self.inner.flush().map_err(FormatError::Io)?;
        Ok(self.inner)
    }
}

/// Reads records one at a time. After the declared count it checks that
/// nothing follows.
pub struct DatasetReader<R: Read> {
    inner: WireReader<R>,
    header: DatasetHeader,
    next: u64,
    done: bool,
}

impl<R: Read> DatasetReader<R> {
    pub fn new(inner: R) -> Result<Self> {
        let mut inner = WireReader::new(inner);
        let header = DatasetHeader::read(&mut inner)?;
        Ok(Self {
            inner,
            header,
            next: 0,
            done: false,
        })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    fn read_record(&mut self) -> std::result::Result<SampleEmbeddings<f32>, FormatError> {
        let index = self.next;
        let r = &mut self.inner;
        let id = r.string(&|| format!("sample {index} id"))?;
        let byte = r.u8(&|| format!("sample {index} label"))?;
        let label = match (byte, self.header.labeled) {
            (UNLABELED, false) => None,
            (b, true) if (b as usize) < CLASS_COUNT => Category::from_index(b as usize),
            (b, _) => {
                return Err(FormatError::Label {
                    sample: index,
                    byte: b,
                })
            }
        };
        let mut seqs = Vec::with_capacity(4);
        for source in Source::ALL {
            let what = || format!("sample {index} {}", source.name());
            let count = r.u32(&what)?;
            if count == 0 || (source.is_text() && count as usize > MAX_TEXT_TOKENS) {
                return Err(FormatError::TokenCount {
                    sample: index,
                    source_name: source.name(),
                    count,
                });
            }
            let width = self.header.width(source);
            let values = r.f32s(u64::from(count) * width as u64, &what)?;
            let tokens = Tensor::new(vec![count as usize, width], values)
                .map_err(|e| FormatError::Record(e.to_string()))?;
            seqs.push(
                TokenSequence::dense(tokens).map_err(|e| FormatError::Record(e.to_string()))?,
            );
        }
        let mut seqs = seqs.into_iter();
        let mut take = || seqs.next().expect("four sequences");
        Ok(SampleEmbeddings {
            id,
            claim_image: take(),
            claim_text: take(),
            doc_image: take(),
            doc_text: take(),
            label,
        })
    }
}

impl<R: Read> Iterator for DatasetReader<R> {
    type Item = Result<SampleEmbeddings<f32>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        if self.next == self.header.sample_count {
            self.done = true;
            let declared = self.header.sample_count;
            return match self
                .inner
                .expect_eof(&|| format!("after {declared} declared samples"))
            {
                Ok(()) => None,
                Err(e) => Some(Err(e.into())),
            };
        }
        let result = self.read_record();
        self.next += 1;
        if result.is_err() {
            self.done = true;
        }
        Some(result.map_err(Error::from))
    }
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Dataset::read_from(BufReader::new(file))
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    dataset.write_to(BufWriter::new(file))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LengthSummary {
    pub min: usize,
    pub mean: f64,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub samples: usize,
    /// `None` for an unlabeled dataset.
    pub class_counts: Option<[usize; CLASS_COUNT]>,
    /// Token lengths per source in storage order.
    pub lengths: Vec<(&'static str, Option<LengthSummary>)>,
}

pub fn dataset_stats(dataset: &Dataset) -> DatasetStats {
    let class_counts = dataset.header.labeled.then(|| {
        let mut counts = [0; CLASS_COUNT];
        for s in &dataset.samples {
            if let Some(c) = s.label {
                counts[c.index()] += 1;
            }
        }
        counts
    });
    let lengths = Source::ALL
        .iter()
        .map(|&source| {
            let lens: Vec<usize> = dataset
                .samples
                .iter()
                .map(|s| s.source(source).len())
                .collect();
            let summary = (!lens.is_empty()).then(|| LengthSummary {
                min: *lens.iter().min().expect("non-empty"),
                mean: lens.iter().sum::<usize>() as f64 / lens.len() as f64,
                max: *lens.iter().max().expect("non-empty"),
            });
            (source.name(), summary)
        })
        .collect();
    DatasetStats {
        samples: dataset.len(),
        class_counts,
        lengths,
    }
}
