//! Scene files: one JSON header line, then one JSON line per frame.
//!
//! ```text
//! {"format":"camradar-scenes","version":1,"frames":N,"seed":S,"simulator":{...},"feature_maps":"scenes.maps"}
//! {"index":0,"seed":...,"scene":{...},"sweeps":[...],"proposals":[...],"proposal_gt":[...]}
//! ...
//! ```
//!
//! Camera feature maps are large, so they live in an optional tensor
//! container next to the scene file (records `frame<i>/cam<c>`). Without it,
//! frames that carry a seed get their maps re-rendered from the stored scene,
//! and the re-rendered proposals must match the stored ones.

use std::borrow::Cow;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use camradar_core::fusion::ImageProposal;
use camradar_core::pipeline::FrameProvider;
use camradar_core::radar::RadarSweep;
use camradar_core::simulator::{render_camera, Frame, Scene, SimConfig};
use camradar_core::tensor::{container, Tensor};
use serde::{Deserialize, Serialize};

pub const FORMAT: &str = "camradar-scenes";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub frames: usize,
    pub seed: u64,
    pub simulator: SimConfig,
    /// File name of the feature-map container, relative to the scene file.
    pub feature_maps: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    /// Frame seed the simulator used; lets feature maps be re-rendered.
    pub seed: Option<u64>,
    pub scene: Scene,
    pub sweeps: Vec<RadarSweep>,
    pub proposals: Vec<ImageProposal>,
    pub proposal_gt: Vec<Option<usize>>,
}

impl FrameRecord {
    pub fn from_frame(index: usize, seed: Option<u64>, f: &Frame) -> Self {
        Self {
            index,
            seed,
            scene: f.scene.clone(),
            sweeps: f.sweeps.clone(),
            proposals: f.proposals.clone(),
            proposal_gt: f.proposal_gt.clone(),
        }
    }
}

/// A loaded scene file.
#[derive(Clone, Debug)]
pub struct SceneFile {
    pub header: Option<Header>,
    pub records: Vec<FrameRecord>,
    /// Per-frame camera maps when the container was present.
    pub maps: Option<Vec<Vec<Tensor>>>,
}

fn maps_path(scene_path: &Path, name: &str) -> PathBuf {
    scene_path.parent().map_or_else(|| PathBuf::from(name), |d| d.join(name))
}

/// Writes `frames` (with their seeds) to `path`; with `with_maps` the camera
/// maps go to `<path>.maps`.
pub fn write_scene_file(path: &Path, seed: u64, simulator: &SimConfig, frames: &[(Option<u64>, Frame)], with_maps: bool) -> Result<()> {
    let map_name = with_maps.then(|| format!("{}.maps", path.file_name().and_then(|n| n.to_str()).unwrap_or("scenes")));
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        frames: frames.len(),
        seed,
        simulator: simulator.clone(),
        feature_maps: map_name.clone(),
    };
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for (i, (s, f)) in frames.iter().enumerate() {
        serde_json::to_writer(&mut w, &FrameRecord::from_frame(i, *s, f))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    if let Some(name) = map_name {
        let mut records = Vec::new();
        for (i, (_, f)) in frames.iter().enumerate() {
            for (c, m) in f.feature_maps.iter().enumerate() {
                records.push((format!("frame{i}/cam{c}"), m.clone()));
            }
        }
        std::fs::write(maps_path(path, &name), container::encode(&records)?)?;
    }
    Ok(())
}

pub fn read_scene_file(path: &Path) -> Result<SceneFile> {
    let reader = BufReader::new(File::open(path).with_context(|| format!("opening scene file {}", path.display()))?);
    let mut lines = reader.lines().enumerate().filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()));
    let Some((_, first)) = lines.next() else {
        return Ok(SceneFile { header: None, records: Vec::new(), maps: None });
    };
    let header: Header = serde_json::from_str(&first?).context("scene file header")?;
    ensure!(header.format == FORMAT, "not a scene file (format {:?})", header.format);
    ensure!(header.version == VERSION, "unsupported scene file version {} (expected {VERSION})", header.version);
    let mut records = Vec::with_capacity(header.frames);
    for (n, line) in lines {
        let r: FrameRecord = serde_json::from_str(&line?).with_context(|| format!("scene file line {}", n + 1))?;
        ensure!(r.index == records.len(), "frame records out of order at line {}", n + 1);
        ensure!(r.proposal_gt.len() == r.proposals.len(), "frame {}: proposal assignment length mismatch", r.index);
        records.push(r);
    }
    ensure!(records.len() == header.frames, "header announces {} frames, file holds {}", header.frames, records.len());
    let maps = match &header.feature_maps {
        Some(name) => {
            let p = maps_path(path, name);
            let bytes = std::fs::read(&p).with_context(|| format!("reading feature maps {}", p.display()))?;
            let mut per_frame: Vec<Vec<Tensor>> = records.iter().map(|_| Vec::new()).collect();
            for (rec_name, t) in container::decode(&bytes)? {
                let Some((f, c)) = rec_name.strip_prefix("frame").and_then(|s| s.split_once("/cam")) else {
                    bail!("unexpected feature map record {rec_name}");
                };
                let (f, c): (usize, usize) = (f.parse()?, c.parse()?);
                ensure!(f < per_frame.len() && c == per_frame[f].len(), "feature map record {rec_name} out of order");
                per_frame[f].push(t);
            }
            Some(per_frame)
        }
        None => None,
    };
    Ok(SceneFile { header: Some(header), records, maps })
}

impl SceneFile {
    pub fn simulator(&self) -> Option<&SimConfig> {
        self.header.as_ref().map(|h| &h.simulator)
    }

    fn build(&self, i: usize) -> Result<Frame> {
        let r = self.records.get(i).with_context(|| format!("frame {i} out of range"))?;
        let feature_maps = match (&self.maps, r.seed, self.simulator()) {
            (Some(m), _, _) => m[i].clone(),
            (None, Some(seed), Some(sim)) => {
                let (props, gt, maps) = render_camera(&r.scene, sim, seed)?;
                ensure!(
                    props == r.proposals && gt == r.proposal_gt,
                    "frame {i}: stored proposals differ from the simulator's; supply the feature-map container"
                );
                maps
            }
            _ => bail!("frame {i} has neither stored feature maps nor a seed to re-render them"),
        };
        Ok(Frame {
            scene: r.scene.clone(),
            sweeps: r.sweeps.clone(),
            proposals: r.proposals.clone(),
            proposal_gt: r.proposal_gt.clone(),
            feature_maps,
        })
    }
}

impl FrameProvider for SceneFile {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn frame(&self, index: usize) -> camradar_core::Result<Cow<'_, Frame>> {
        self.build(index).map(Cow::Owned).map_err(|e| camradar_core::Error::InvalidInput(format!("{e:#}")))
    }
}
