//! Video ingestion. Frames arrive through a [`FrameSource`], which streams one
//! decoded RGB frame at a time.
//!
//! The built-in container is a raw RGB stream: the magic line `MVRAW1`, one
//! JSON header line `{"fps", "width", "height", "frames"}`, then `frames`
//! tightly packed `width * height * 3` byte frames. Other containers are decoded
//! by an external `ffmpeg` binary when one is on the `PATH`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::process::{Child, ChildStdout, Command, Stdio};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Frame;

pub const RAW_MAGIC: &[u8] = b"MVRAW1\n";

/// Stream-level facts about a video.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VideoInfo {
    pub fps: f64,
    pub width: u32,
    pub height: u32,
    /// Declared frame count, when the container knows it.
    pub frames: Option<u64>,
}

impl VideoInfo {
    fn validate(&self) -> Result<()> {
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::Ingestion {
                frame: 0,
                message: format!("invalid frame rate {}", self.fps),
            });
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Ingestion {
                frame: 0,
                message: format!("invalid frame size {}x{}", self.width, self.height),
            });
        }
        Ok(())
    }

    pub fn duration_s(&self) -> Option<f64> {
        self.frames.map(|n| n as f64 / self.fps)
    }

    fn frame_bytes(&self) -> usize {
        self.width as usize * self.height as usize * 3
    }
}

/// A sequential supply of decoded frames.
pub trait FrameSource: Send {
    fn info(&self) -> VideoInfo;

    /// The next frame, stamped `index / fps`, or `None` at end of stream.
    fn next_frame(&mut self) -> Result<Option<Frame>>;
}

/// Frames held in memory.
#[derive(Debug, Clone)]
pub struct MemorySource {
    info: VideoInfo,
    images: std::vec::IntoIter<RgbImage>,
    next: u64,
}

impl MemorySource {
    pub fn new(fps: f64, images: Vec<RgbImage>) -> Result<MemorySource> {
        let (width, height) = images.first().map(|i| i.dimensions()).unwrap_or((1, 1));
        let info = VideoInfo {
            fps,
            width,
            height,
            frames: Some(images.len() as u64),
        };
        info.validate()?;
        Ok(MemorySource {
            info,
            images: images.into_iter(),
            next: 0,
        })
    }
}

impl FrameSource for MemorySource {
    fn info(&self) -> VideoInfo {
        self.info
    }

    fn next_frame(&mut self) -> Result<Option<Frame>> {
        match self.images.next() {
            None => Ok(None),
            Some(img) => {
                let index = self.next;
                self.next += 1;
                Frame::at_index(index, self.info.fps, img)
                    .map(Some)
                    .map_err(|e| Error::Ingestion {
                        frame: index,
                        message: e.to_string(),
                    })
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RawHeader {
    fps: f64,
    width: u32,
    height: u32,
    frames: u64,
}

/// Reader for the raw container.
pub struct RawVideoReader<R> {
    reader: R,
    info: VideoInfo,
    next: u64,
}

impl RawVideoReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        RawVideoReader::new(BufReader::new(file))
    }
}

impl<R: BufRead> RawVideoReader<R> {
    pub fn new(mut reader: R) -> Result<Self> {
        let mut magic = vec![0u8; RAW_MAGIC.len()];
        reader.read_exact(&mut magic).map_err(|_| not_raw())?;
        if magic != RAW_MAGIC {
            return Err(not_raw());
        }
        let mut line = String::new();
        reader
            .read_line(&mut line)
            .map_err(|e| Error::Ingestion {
                frame: 0,
                message: format!("unreadable header: {e}"),
            })?;
        let header: RawHeader = serde_json::from_str(line.trim()).map_err(|e| Error::Ingestion {
            frame: 0,
            message: format!("malformed header: {e}"),
        })?;
        let info = VideoInfo {
            fps: header.fps,
            width: header.width,
            height: header.height,
            frames: Some(header.frames),
        };
        info.validate()?;
        Ok(RawVideoReader { reader, info, next: 0 })
    }
}

fn not_raw() -> Error {
    Error::Ingestion {
        frame: 0,
        message: "missing MVRAW1 magic".into(),
    }
}

impl<R: BufRead + Send> FrameSource for RawVideoReader<R> {
    fn info(&self) -> VideoInfo {
        self.info
    }

    fn next_frame(&mut self) -> Result<Option<Frame>> {
        if Some(self.next) == self.info.frames {
            return Ok(None);
        }
        let index = self.next;
        let mut buf = vec![0u8; self.info.frame_bytes()];
        self.reader.read_exact(&mut buf).map_err(|e| Error::Ingestion {
            frame: index,
            message: format!("truncated frame data: {e}"),
        })?;
        self.next += 1;
        let image = RgbImage::from_raw(self.info.width, self.info.height, buf).expect("buffer sized from header");
        Frame::at_index(index, self.info.fps, image).map(Some)
    }
}

/// Writes frames in the raw container.
pub fn write_raw_video(path: impl AsRef<Path>, fps: f64, images: &[RgbImage]) -> Result<()> {
    let path = path.as_ref();
    let (width, height) = images
        .first()
        .map(|i| i.dimensions())
        .ok_or_else(|| Error::Validation("a video needs at least one frame".into()))?;
    if images.iter().any(|i| i.dimensions() != (width, height)) {
        return Err(Error::Validation("all frames must share one size".into()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = RawHeader {
        fps,
        width,
        height,
        frames: images.len() as u64,
    };
    let io = |e| Error::io(path, e);
    w.write_all(RAW_MAGIC).map_err(io)?;
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(io)?;
    for img in images {
        w.write_all(img.as_raw()).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Decodes any container `ffmpeg` understands, piping raw RGB frames.
pub struct FfmpegSource {
    child: Child,
    stdout: ChildStdout,
    info: VideoInfo,
    next: u64,
}

impl FfmpegSource {
    pub fn available() -> bool {
        Command::new("ffprobe")
            .arg("-version")
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status()
            .map(|s| s.success())
            .unwrap_or(false)
    }

    pub fn probe(path: &Path) -> Result<VideoInfo> {
        let out = Command::new("ffprobe")
            .args([
                "-v",
                "error",
                "-select_streams",
                "v:0",
                "-show_entries",
                "stream=width,height,r_frame_rate,nb_frames",
                "-of",
                "json",
            ])
            .arg(path)
            .output()
            .map_err(|e| Error::io(path, e))?;
        if !out.status.success() {
            return Err(Error::Ingestion {
                frame: 0,
                message: format!("ffprobe: {}", String::from_utf8_lossy(&out.stderr).trim()),
            });
        }
        #[derive(Deserialize)]
        struct Probe {
            streams: Vec<Stream>,
        }
        #[derive(Deserialize)]
        struct Stream {
            width: u32,
            height: u32,
            r_frame_rate: String,
            nb_frames: Option<String>,
        }
        let probe: Probe = serde_json::from_slice(&out.stdout)?;
        let stream = probe.streams.into_iter().next().ok_or_else(|| Error::Ingestion {
            frame: 0,
            message: "no video stream".into(),
        })?;
        let fps = match stream.r_frame_rate.split_once('/') {
            Some((n, d)) => n.parse::<f64>().unwrap_or(0.0) / d.parse::<f64>().unwrap_or(1.0),
            None => stream.r_frame_rate.parse().unwrap_or(0.0),
        };
        let info = VideoInfo {
            fps,
            width: stream.width,
            height: stream.height,
            frames: stream.nb_frames.and_then(|n| n.parse().ok()),
        };
        info.validate()?;
        Ok(info)
    }

    pub fn open(path: &Path) -> Result<FfmpegSource> {
        let info = FfmpegSource::probe(path)?;
        let mut child = Command::new("ffmpeg")
            .args(["-v", "error", "-i"])
            .arg(path)
            .args(["-f", "rawvideo", "-pix_fmt", "rgb24", "-"])
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| Error::io(path, e))?;
        let stdout = child.stdout.take().expect("piped stdout");
        Ok(FfmpegSource {
            child,
            stdout,
            info,
            next: 0,
        })
    }
}

impl FrameSource for FfmpegSource {
    fn info(&self) -> VideoInfo {
        self.info
    }

    fn next_frame(&mut self) -> Result<Option<Frame>> {
        let index = self.next;
        let mut buf = vec![0u8; self.info.frame_bytes()];
        let mut filled = 0;
        while filled < buf.len() {
            match self.stdout.read(&mut buf[filled..]) {
                Ok(0) => break,
                Ok(n) => filled += n,
                Err(e) => {
                    return Err(Error::Ingestion {
                        frame: index,
                        message: e.to_string(),
                    })
                }
            }
        }
        if filled == 0 {
            return Ok(None);
        }
        if filled < buf.len() {
            return Err(Error::Ingestion {
                frame: index,
                message: "truncated frame from decoder".into(),
            });
        }
        self.next += 1;
        let image = RgbImage::from_raw(self.info.width, self.info.height, buf).expect("sized buffer");
        Frame::at_index(index, self.info.fps, image).map(Some)
    }
}

impl Drop for FfmpegSource {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn has_raw_magic(path: &Path) -> Result<bool> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = vec![0u8; RAW_MAGIC.len()];
    Ok(file.read_exact(&mut head).is_ok() && head == RAW_MAGIC)
}

/// Opens a video by sniffing its content.
pub fn open_video(path: impl AsRef<Path>) -> Result<Box<dyn FrameSource>> {
    let path = path.as_ref();
    if has_raw_magic(path)? {
        return Ok(Box::new(RawVideoReader::open(path)?));
    }
    if FfmpegSource::available() {
        return Ok(Box::new(FfmpegSource::open(path)?));
    }
    Err(unrecognized(path))
}

fn unrecognized(path: &Path) -> Error {
    Error::Ingestion {
        frame: 0,
        message: format!(
            "{} is not a raw MVRAW1 video and no ffmpeg decoder is installed",
            path.display()
        ),
    }
}

/// Checks that a file decodes: reads the header and the first frame.
pub fn probe(path: impl AsRef<Path>) -> Result<VideoInfo> {
    let path = path.as_ref();
    let mut source = open_video(path)?;
    let info = source.info();
    if source.next_frame()?.is_none() {
        return Err(Error::Ingestion {
            frame: 0,
            message: "video contains no frames".into(),
        });
    }
    Ok(info)
}
