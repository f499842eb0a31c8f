//! Round plans, upload envelopes, and the other message bodies exchanged
//! between server and clients, with their wire encodings.

use crate::comms::wire::{Reader, Writer};
use crate::comms::{CommsError, Message, MessageKind};
use crate::params::ParameterSet;
use crate::tracker::{MetricRecord, Scope};

/// Workflow-specific instructions carried by a plan.
#[derive(Debug, Clone, PartialEq)]
pub enum Directive {
    /// Local training of `models[0]`. A label subset restricts the client to
    /// those classes; a threshold switches to pseudo-labeled training.
    Train {
        seed: u64,
        label_subset: Option<Vec<usize>>,
        pseudo_label_threshold: Option<f64>,
    },
    /// Pick the lowest-loss model of `models`, train it, tag the upload.
    ClusterTrain { seed: u64 },
    /// Train the front half `models[0]` against the server's back half.
    SplitTrain { seed: u64 },
    /// Evaluate on local test data. With several models the client first
    /// picks the lowest-loss one on its training data; fine-tuning epochs
    /// add a second, locally adapted evaluation.
    Evaluate {
        seed: u64,
        fine_tune_epochs: u32,
        label_subset: Option<Vec<usize>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundPlan {
    pub round_index: u64,
    pub selected_client_ids: Vec<usize>,
    /// The exchanged global blocks, or one set per cluster.
    pub models: Vec<ParameterSet>,
    pub directive: Directive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UploadEnvelope {
    pub client_id: usize,
    pub round_index: u64,
    pub parameters: ParameterSet,
    pub num_samples: usize,
    pub train_loss: f64,
    pub metrics: Vec<MetricRecord>,
    pub cluster_id: Option<usize>,
}

/// Body of an UPLOAD message.
#[derive(Debug, Clone, PartialEq)]
pub enum UploadReply {
    Envelope(UploadEnvelope),
    /// Nothing to contribute this round, e.g. no confident pseudo-labels.
    Skipped { client_id: usize, reason: String },
    Failed { client_id: usize, error: String },
}

impl UploadReply {
    pub fn client_id(&self) -> usize {
        match self {
            UploadReply::Envelope(e) => e.client_id,
            UploadReply::Skipped { client_id, .. } | UploadReply::Failed { client_id, .. } => *client_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub client_id: usize,
    pub accuracy: f64,
    pub loss: f64,
    pub num_samples: usize,
    pub cluster_id: Option<usize>,
    /// Accuracy after local fine-tuning, when requested.
    pub fine_tuned_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvalReply {
    Report(EvalReport),
    Failed { client_id: usize, error: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    pub client_id: usize,
    pub batch_index: u64,
    pub cols: usize,
    pub values: Vec<f32>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationGrads {
    pub batch_index: u64,
    pub loss: f64,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftNotice {
    pub client_id: usize,
    pub divergence: f64,
    pub flagged: bool,
    pub cached_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Register {
    pub client_id: usize,
    pub num_train: usize,
    pub num_test: usize,
}

/// A typed message body.
pub trait Body: Sized {
    const KIND: MessageKind;
    fn write(&self, w: &mut Writer);
    fn read(r: &mut Reader<'_>) -> Result<Self, CommsError>;

    fn to_message(&self, task_id: &str, round_index: u64) -> Message {
        let mut w = Writer::new();
        self.write(&mut w);
        Message::new(Self::KIND, task_id, round_index, w.into_bytes())
    }

    fn from_message(m: &Message) -> Result<Self, CommsError> {
        if m.kind != Self::KIND {
            return Err(CommsError::Malformed(format!("expected {:?}, got {:?}", Self::KIND, m.kind)));
        }
        let mut r = Reader::new(&m.body);
        let body = Self::read(&mut r)?;
        r.finish()?;
        Ok(body)
    }
}

fn write_usizes(w: &mut Writer, v: &[usize]) {
    w.u64s(v.iter().map(|&x| x as u64));
}

fn read_usizes(r: &mut Reader<'_>) -> Result<Vec<usize>, CommsError> {
    Ok(r.u64s()?.into_iter().map(|x| x as usize).collect())
}

fn write_opt_usizes(w: &mut Writer, v: &Option<Vec<usize>>) {
    match v {
        Some(v) => {
            w.u8(1);
            write_usizes(w, v);
        }
        None => {
            w.u8(0);
        }
    }
}

fn read_opt_usizes(r: &mut Reader<'_>) -> Result<Option<Vec<usize>>, CommsError> {
    Ok(if r.bool()? { Some(read_usizes(r)?) } else { None })
}

fn opt_usize(v: Option<usize>) -> Option<u64> {
    v.map(|x| x as u64)
}

fn bad_tag(what: &str, tag: u8) -> CommsError {
    CommsError::Malformed(format!("unknown {what} tag {tag}"))
}

impl Body for RoundPlan {
    const KIND: MessageKind = MessageKind::Plan;

    fn write(&self, w: &mut Writer) {
        w.u64(self.round_index);
        write_usizes(w, &self.selected_client_ids);
        w.u32(self.models.len() as u32);
        for m in &self.models {
            w.params(m);
        }
        match &self.directive {
            Directive::Train {
                seed,
                label_subset,
                pseudo_label_threshold,
            } => {
                w.u8(0).u64(*seed);
                write_opt_usizes(w, label_subset);
                w.opt_f64(*pseudo_label_threshold);
            }
            Directive::ClusterTrain { seed } => {
                w.u8(1).u64(*seed);
            }
            Directive::SplitTrain { seed } => {
                w.u8(2).u64(*seed);
            }
            Directive::Evaluate {
                seed,
                fine_tune_epochs,
                label_subset,
            } => {
                w.u8(3).u64(*seed).u32(*fine_tune_epochs);
                write_opt_usizes(w, label_subset);
            }
        }
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, CommsError> {
        let round_index = r.u64()?;
        let selected_client_ids = read_usizes(r)?;
        let n = r.u32()? as usize;
        let models = (0..n).map(|_| r.params()).collect::<Result<Vec<_>, _>>()?;
        let directive = match r.u8()? {
            0 => Directive::Train {
                seed: r.u64()?,
                label_subset: read_opt_usizes(r)?,
                pseudo_label_threshold: r.opt_f64()?,
            },
            1 => Directive::ClusterTrain { seed: r.u64()? },
            2 => Directive::SplitTrain { seed: r.u64()? },
            3 => Directive::Evaluate {
                seed: r.u64()?,
                fine_tune_epochs: r.u32()?,
                label_subset: read_opt_usizes(r)?,
            },
            t => return Err(bad_tag("directive", t)),
        };
        Ok(RoundPlan {
            round_index,
            selected_client_ids,
            models,
            directive,
        })
    }
}

fn write_record(w: &mut Writer, m: &MetricRecord) {
    w.str(&m.task_id)
        .u64(m.round_index)
        .str(&m.scope.to_string())
        .str(&m.name)
        .f64(m.value)
        .f64(m.wall_time);
}

fn read_record(r: &mut Reader<'_>) -> Result<MetricRecord, CommsError> {
    let task_id = r.str()?;
    let round_index = r.u64()?;
    let scope: Scope = r.str()?.parse().map_err(CommsError::Malformed)?;
    Ok(MetricRecord {
        task_id,
        round_index,
        scope,
        name: r.str()?,
        value: r.f64()?,
        wall_time: r.f64()?,
    })
}

impl Body for UploadReply {
    const KIND: MessageKind = MessageKind::Upload;

    fn write(&self, w: &mut Writer) {
        match self {
            UploadReply::Envelope(e) => {
                w.u8(0)
                    .u64(e.client_id as u64)
                    .u64(e.round_index)
                    .params(&e.parameters)
                    .u64(e.num_samples as u64)
                    .f64(e.train_loss)
                    .u32(e.metrics.len() as u32);
                for m in &e.metrics {
                    write_record(w, m);
                }
                w.opt_u64(opt_usize(e.cluster_id));
            }
            UploadReply::Skipped { client_id, reason } => {
                w.u8(1).u64(*client_id as u64).str(reason);
            }
            UploadReply::Failed { client_id, error } => {
                w.u8(2).u64(*client_id as u64).str(error);
            }
        }
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, CommsError> {
        match r.u8()? {
            0 => {
                let client_id = r.u64()? as usize;
                let round_index = r.u64()?;
                let parameters = r.params()?;
                let num_samples = r.u64()? as usize;
                let train_loss = r.f64()?;
                let n = r.u32()? as usize;
                let metrics = (0..n).map(|_| read_record(r)).collect::<Result<Vec<_>, _>>()?;
                let cluster_id = r.opt_u64()?.map(|c| c as usize);
                Ok(UploadReply::Envelope(UploadEnvelope {
                    client_id,
                    round_index,
                    parameters,
                    num_samples,
                    train_loss,
                    metrics,
                    cluster_id,
                }))
            }
            1 => Ok(UploadReply::Skipped {
                client_id: r.u64()? as usize,
                reason: r.str()?,
            }),
            2 => Ok(UploadReply::Failed {
                client_id: r.u64()? as usize,
                error: r.str()?,
            }),
            t => Err(bad_tag("upload", t)),
        }
    }
}

impl Body for EvalReply {
    const KIND: MessageKind = MessageKind::EvalResult;

    fn write(&self, w: &mut Writer) {
        match self {
            EvalReply::Report(e) => {
                w.u8(0)
                    .u64(e.client_id as u64)
                    .f64(e.accuracy)
                    .f64(e.loss)
                    .u64(e.num_samples as u64)
                    .opt_u64(opt_usize(e.cluster_id))
                    .opt_f64(e.fine_tuned_accuracy);
            }
            EvalReply::Failed { client_id, error } => {
                w.u8(1).u64(*client_id as u64).str(error);
            }
        }
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, CommsError> {
        match r.u8()? {
            0 => Ok(EvalReply::Report(EvalReport {
                client_id: r.u64()? as usize,
                accuracy: r.f64()?,
                loss: r.f64()?,
                num_samples: r.u64()? as usize,
                cluster_id: r.opt_u64()?.map(|c| c as usize),
                fine_tuned_accuracy: r.opt_f64()?,
            })),
            1 => Ok(EvalReply::Failed {
                client_id: r.u64()? as usize,
                error: r.str()?,
            }),
            t => Err(bad_tag("eval", t)),
        }
    }
}

impl Body for ActivationBatch {
    const KIND: MessageKind = MessageKind::Activations;

    fn write(&self, w: &mut Writer) {
        w.u64(self.client_id as u64).u64(self.batch_index).u64(self.cols as u64).f32s(&self.values);
        write_usizes(w, &self.labels);
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, CommsError> {
        let b = ActivationBatch {
            client_id: r.u64()? as usize,
            batch_index: r.u64()?,
            cols: r.u64()? as usize,
            values: r.f32s()?,
            labels: read_usizes(r)?,
        };
        if b.values.len() != b.cols.saturating_mul(b.labels.len()) {
            return Err(CommsError::Malformed("activation matrix shape does not match labels".into()));
        }
        Ok(b)
    }
}

impl Body for ActivationGrads {
    const KIND: MessageKind = MessageKind::ActGrads;

    fn write(&self, w: &mut Writer) {
        w.u64(self.batch_index).f64(self.loss).f32s(&self.values);
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, CommsError> {
        Ok(ActivationGrads {
            batch_index: r.u64()?,
            loss: r.f64()?,
            values: r.f32s()?,
        })
    }
}

impl Body for DriftNotice {
    const KIND: MessageKind = MessageKind::DriftNotice;

    fn write(&self, w: &mut Writer) {
        w.u64(self.client_id as u64)
            .f64(self.divergence)
            .bool(self.flagged)
            .u64(self.cached_samples as u64);
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, CommsError> {
        Ok(DriftNotice {
            client_id: r.u64()? as usize,
            divergence: r.f64()?,
            flagged: r.bool()?,
            cached_samples: r.u64()? as usize,
        })
    }
}

impl Body for Register {
    const KIND: MessageKind = MessageKind::Register;

    fn write(&self, w: &mut Writer) {
        w.u64(self.client_id as u64).u64(self.num_train as u64).u64(self.num_test as u64);
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, CommsError> {
        Ok(Register {
            client_id: r.u64()? as usize,
            num_train: r.u64()? as usize,
            num_test: r.u64()? as usize,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Block;
    use proptest::prelude::*;

    fn params_strategy() -> impl Strategy<Value = ParameterSet> {
        proptest::collection::vec((1usize..4, 1usize..4), 0..3).prop_flat_map(|shapes| {
            let lens: Vec<usize> = shapes.iter().map(|(a, b)| a * b).collect();
            let total: usize = lens.iter().sum();
            proptest::collection::vec(any::<f32>(), total).prop_map(move |vals| {
                let mut off = 0;
                let blocks = shapes
                    .iter()
                    .enumerate()
                    .map(|(i, &(a, b))| {
                        let v = vals[off..off + a * b].to_vec();
                        off += a * b;
                        Block::new(format!("b{i}"), vec![a, b], v).unwrap()
                    })
                    .collect();
                ParameterSet::new(blocks).unwrap()
            })
        })
    }

    fn same_bits(a: &ParameterSet, b: &ParameterSet) -> bool {
        a.congruent(b) && a.iter_values().zip(b.iter_values()).all(|(x, y)| x.to_bits() == y.to_bits())
    }

    fn round_trip<B: Body + std::fmt::Debug>(b: &B) -> B {
        let m = b.to_message("task-1", 7);
        let bytes = m.encode().unwrap();
        let back = Message::decode(&bytes).unwrap();
        assert_eq!(back, m);
        B::from_message(&back).unwrap()
    }

    proptest! {
        #[test]
        fn plan_round_trip(p in params_strategy(), seed in any::<u64>(), ids in proptest::collection::vec(0usize..100, 0..5), tag in 0u8..4) {
            let directive = match tag {
                0 => Directive::Train { seed, label_subset: Some(ids.clone()), pseudo_label_threshold: Some(0.9) },
                1 => Directive::ClusterTrain { seed },
                2 => Directive::SplitTrain { seed },
                _ => Directive::Evaluate { seed, fine_tune_epochs: 2, label_subset: None },
            };
            let plan = RoundPlan { round_index: 7, selected_client_ids: ids, models: vec![p.clone(), p], directive };
            let back = round_trip(&plan);
            prop_assert!(back.models.iter().zip(&plan.models).all(|(a, b)| same_bits(a, b)));
            prop_assert_eq!(back.directive, plan.directive);
            prop_assert_eq!(back.selected_client_ids, plan.selected_client_ids);
        }

        #[test]
        fn upload_round_trip(p in params_strategy(), n in 0usize..1000, loss in -1e6f64..1e6, cluster in proptest::option::of(0usize..5)) {
            let e = UploadEnvelope {
                client_id: 3,
                round_index: 7,
                parameters: p,
                num_samples: n,
                train_loss: loss,
                metrics: vec![MetricRecord::new("task-1", 7, Scope::Client(3), "train_seconds", 0.25)],
                cluster_id: cluster,
            };
            match round_trip(&UploadReply::Envelope(e.clone())) {
                UploadReply::Envelope(b) => {
                    prop_assert!(same_bits(&b.parameters, &e.parameters));
                    prop_assert_eq!(b.num_samples, e.num_samples);
                    prop_assert_eq!(b.metrics, e.metrics);
                    prop_assert_eq!(b.cluster_id, e.cluster_id);
                }
                other => prop_assert!(false, "{:?}", other),
            }
        }
    }

    #[test]
    fn small_bodies_round_trip() {
        let s = UploadReply::Skipped {
            client_id: 2,
            reason: "no confident samples".into(),
        };
        assert_eq!(round_trip(&s), s);
        let e = EvalReply::Report(EvalReport {
            client_id: 1,
            accuracy: 0.5,
            loss: 1.25,
            num_samples: 40,
            cluster_id: Some(1),
            fine_tuned_accuracy: Some(0.75),
        });
        assert_eq!(round_trip(&e), e);
        let a = ActivationBatch {
            client_id: 1,
            batch_index: 3,
            cols: 2,
            values: vec![1.0, 2.0, 3.0, 4.0],
            labels: vec![0, 1],
        };
        assert_eq!(round_trip(&a), a);
        let g = ActivationGrads {
            batch_index: 3,
            loss: 0.5,
            values: vec![0.1; 4],
        };
        assert_eq!(round_trip(&g), g);
        let d = DriftNotice {
            client_id: 4,
            divergence: 0.6,
            flagged: true,
            cached_samples: 10,
        };
        assert_eq!(round_trip(&d), d);
        let r = Register {
            client_id: 9,
            num_train: 100,
            num_test: 20,
        };
        assert_eq!(round_trip(&r), r);
    }

    #[test]
    fn wrong_kind_and_trailing_bytes_rejected() {
        let r = Register {
            client_id: 1,
            num_train: 1,
            num_test: 1,
        };
        let mut m = r.to_message("t", 0);
        assert!(DriftNotice::from_message(&m).is_err());
        m.body.push(0);
        assert!(Register::from_message(&m).is_err());
    }
}
