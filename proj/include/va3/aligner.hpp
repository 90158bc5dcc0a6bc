#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "va3/autodiff.hpp"
#include "va3/nn.hpp"
#include "va3/params.hpp"
#include "va3/random.hpp"

namespace va3 {

VA3_DEFINE_ERROR(EmptyRelevantError);
VA3_DEFINE_ERROR(EmptyPoolError);

/// Three-level clip features of one video.
struct VideoFeatures {
  Tensor objects;     // [n_c, n_f, n_o, h_v]
  Tensor appearance;  // [n_c, n_f, h_v]
  Tensor motion;      // [n_c, h_v]

  std::size_t clips() const { return motion.rank() == 2 ? motion.dim(0) : 0; }
  std::size_t frames() const { return appearance.dim(1); }
  std::size_t objects_per_frame() const { return objects.dim(2); }
  std::size_t width() const { return motion.dim(1); }

  // Throws ShapeError on inconsistent dims, NonFiniteError on NaN/Inf.
  void validate() const;
  VideoFeatures select_clips(std::span<const std::size_t> clips) const;
  // Copies clip `clip` of `source` into slot `slot` at all three levels.
  void replace_clip(std::size_t slot, const VideoFeatures& source, std::size_t clip);
  bool operator==(const VideoFeatures&) const = default;
};

struct AlignerDims {
  std::size_t h_v = 8;
  std::size_t h_q = 8;
  std::size_t h = 16;
  std::size_t vocab = 5;
  std::size_t heads = 4;
};

/// Bottom-up question-conditioned clip selection parameters.
struct Aligner {
  AlignerDims dims;
  nn::Linear question_proj;  // h_q -> h_v
  nn::TransformerLayer object_tf, frame_tf, clip_tf;
  nn::Linear object_score;  // W_o, b_o
  nn::Linear frame_score;
  nn::Linear object_proj;  // 2h_v -> h_v ahead of the frame stage
  nn::Linear frame_proj;   // 2h_v -> h_v ahead of the clip stage
  nn::Mlp relevant_head;   // MLP_1
  nn::Mlp irrelevant_head; // MLP_2

  static Aligner create(ParamStore& params, const std::string& name, const AlignerDims& dims);
};

/// Reference backbone F(v, q) -> [h].
///
/// Pools motion-level clips (a weighted mean when clip weights are given),
/// mean-pools question tokens, concatenates, then a 2-layer MLP.
struct Backbone {
  nn::Mlp mlp;

  static Backbone create(ParamStore& params, const std::string& name, std::size_t h_v,
                         std::size_t h_q, std::size_t h);
  // `weights` is [n_c] or undefined for a plain mean over all clips.
  ad::Var operator()(const ad::Var& motion, const ad::Var& weights,
                     const ad::Var& question) const;
};

struct AlignerModel {
  Aligner aligner;
  Backbone backbone;
  nn::Linear answer_head;  // W_o1, b_o1: h -> vocab

  static AlignerModel create(ParamStore& params, const AlignerDims& dims);
};

ad::Var project_question(const ad::Var& tokens, const Aligner& aligner);

// f_o [n_c, n_f, n_o, h_v], f_a [n_c, n_f, h_v], f_q [n_q, h_v]
// -> [n_c, n_f, 2h_v].
ad::Var aggregate_objects(const ad::Var& f_o, const ad::Var& f_a, const ad::Var& f_q,
                          const Aligner& aligner);
// f_a_c [n_c, n_f, 2h_v], f_m [n_c, h_v] -> [n_c, 2h_v].
ad::Var aggregate_frames(const ad::Var& f_a_c, const ad::Var& f_m, const ad::Var& f_q,
                         const Aligner& aligner);

struct ClipIndicator {
  ad::Var indicator;  // [n_c, 2]: relevant, irrelevant
  ad::Var logits;     // [n_c, 2]: s_rel, s_irr
  std::vector<std::size_t> relevant;
  std::vector<std::size_t> irrelevant;
};

// Gumbel-softmax over [s_rel || s_irr] rows. Hard mode forwards one-hots and
// moves the argmax-s_rel clip into the relevant set when it would be empty.
ClipIndicator indicator_from_logits(const ad::Var& logits, const Tensor& noise,
                                    double temperature, bool hard);
// f_m_c [n_c, 2h_v] -> indicator. `noise` is [n_c, 2].
ClipIndicator clip_indicator(const ad::Var& f_m_c, const ad::Var& f_q, const Aligner& aligner,
                             double temperature, bool hard, const Tensor& noise);
ClipIndicator clip_indicator(const ad::Var& f_m_c, const ad::Var& f_q, const Aligner& aligner,
                             double temperature, bool hard, Rng* rng);

// Runs object, frame and clip stages for one (video, question) pair.
ClipIndicator select_clips(const VideoFeatures& v, const Tensor& question,
                           const Aligner& aligner, double temperature, bool hard,
                           const Tensor& noise);

struct ClipSource {
  std::size_t video = 0;
  std::size_t clip = 0;
  bool operator==(const ClipSource&) const = default;
};

// One uniformly drawn (video, clip) per slot.
std::vector<ClipSource> sample_replacements(std::size_t slots,
                                            std::span<const VideoFeatures> pool, Rng& rng);
// Motion rows of the sampled clips, [slots, h_v].
Tensor replacement_motion(std::span<const ClipSource> sources,
                          std::span<const VideoFeatures> pool);

struct VideoViews {
  VideoFeatures relevant;    // v̂_r
  VideoFeatures irrelevant;  // v̂_c
  VideoFeatures positive;    // v̂'
  std::vector<ClipSource> replacements;  // aligned with the irrelevant set
};

VideoViews build_views(const VideoFeatures& v, const ClipIndicator& indicator,
                       std::span<const VideoFeatures> pool, Rng& rng);

// -log(e^{a.p} / (e^{a.p} + e^{a.n})), stabilized.
ad::Var alignment_contrastive_loss(const ad::Var& anchor, const ad::Var& positive,
                                   const ad::Var& negative);

struct AlignerOptions {
  double temperature = 1.0;
  bool hard = true;
  bool contrastive = true;
};

struct AlignerStep {
  ClipIndicator indicator;
  ad::Var joint;         // f_{v̂_r, q}, [h]
  ad::Var logits;        // [vocab]
  ad::Var distribution;  // softmax of logits
  ad::Var answer_loss;   // CE, undefined without gold
  ad::Var contrastive;   // 0 when v̂_c is empty or the term is disabled
  ad::Var loss;          // answer_loss + contrastive
};

/// Answer head on the relevant view plus the total aligner loss.
///
/// Views enter the backbone as clip weights taken from the indicator
/// columns, so forward values equal those of the hard views while
/// gradients reach the indicator. `replacements` holds one motion row per
/// clip slot; only irrelevant slots use theirs.
AlignerStep aligner_answer_and_loss(const AlignerModel& model, const VideoFeatures& v,
                                    const Tensor& question, std::optional<std::size_t> gold,
                                    const Tensor& replacements, const AlignerOptions& options,
                                    const Tensor& noise);

// Same loss for an already computed indicator.
AlignerStep aligner_loss_from_indicator(const AlignerModel& model, const VideoFeatures& v,
                                        const Tensor& question, std::optional<std::size_t> gold,
                                        const Tensor& replacements,
                                        const AlignerOptions& options, ClipIndicator indicator);

// Backbone on the full video with the same answer head and CE.
AlignerStep backbone_answer(const AlignerModel& model, const VideoFeatures& v,
                            const Tensor& question, std::optional<std::size_t> gold);

}  // namespace va3
