#include "va3/aligner.hpp"

#include <cmath>

namespace va3 {

using ad::Var;

void VideoFeatures::validate() const {
  if (motion.rank() != 2 || appearance.rank() != 3 || objects.rank() != 4) {
    throw ShapeError("video features need ranks 4/3/2, got " + shape_to_string(objects.shape()) +
                     ", " + shape_to_string(appearance.shape()) + ", " +
                     shape_to_string(motion.shape()));
  }
  const std::size_t n_c = motion.dim(0), h_v = motion.dim(1);
  if (appearance.dim(0) != n_c || objects.dim(0) != n_c || appearance.dim(1) != objects.dim(1) ||
      appearance.dim(2) != h_v || objects.dim(3) != h_v) {
    throw ShapeError("video feature levels disagree: " + shape_to_string(objects.shape()) +
                     ", " + shape_to_string(appearance.shape()) + ", " +
                     shape_to_string(motion.shape()));
  }
  if (n_c == 0 || appearance.dim(1) == 0 || objects.dim(2) == 0) {
    throw ShapeError("video features need at least one clip, frame and object");
  }
  for (const Tensor* t : {&objects, &appearance, &motion}) {
    for (double x : t->data()) {
      if (!std::isfinite(x)) throw NonFiniteError("video features contain NaN or Inf");
    }
  }
}

namespace {

// Copies the rows `clips` of a tensor whose first axis is the clip axis.
Tensor take_rows(const Tensor& t, std::span<const std::size_t> clips) {
  Shape shape = t.shape();
  const std::size_t row = shape[0] == 0 ? 0 : t.size() / shape[0];
  shape[0] = clips.size();
  Tensor out(shape);
  for (std::size_t i = 0; i < clips.size(); ++i) {
    if (clips[i] >= t.dim(0)) throw IndexError("clip index out of range");
    std::copy_n(t.data().begin() + clips[i] * row, row, out.data().begin() + i * row);
  }
  return out;
}

void copy_row(Tensor& dst, std::size_t slot, const Tensor& src, std::size_t clip) {
  const std::size_t row = dst.size() / dst.dim(0);
  if (src.size() / src.dim(0) != row) throw ShapeError("replacement clip width mismatch");
  std::copy_n(src.data().begin() + clip * row, row, dst.data().begin() + slot * row);
}

}  // namespace

VideoFeatures VideoFeatures::select_clips(std::span<const std::size_t> clips) const {
  return {take_rows(objects, clips), take_rows(appearance, clips), take_rows(motion, clips)};
}

void VideoFeatures::replace_clip(std::size_t slot, const VideoFeatures& source,
                                 std::size_t clip) {
  if (slot >= clips() || clip >= source.clips()) throw IndexError("clip index out of range");
  copy_row(objects, slot, source.objects, clip);
  copy_row(appearance, slot, source.appearance, clip);
  copy_row(motion, slot, source.motion, clip);
}

Aligner Aligner::create(ParamStore& params, const std::string& name, const AlignerDims& dims) {
  Aligner a;
  a.dims = dims;
  a.question_proj = nn::Linear::create(params, name + ".qproj", dims.h_q, dims.h_v);
  a.object_tf = nn::TransformerLayer::create(params, name + ".tf_obj", dims.h_v, dims.heads);
  a.frame_tf = nn::TransformerLayer::create(params, name + ".tf_frame", dims.h_v, dims.heads);
  a.clip_tf = nn::TransformerLayer::create(params, name + ".tf_clip", dims.h_v, dims.heads);
  a.object_score = nn::Linear::create(params, name + ".score_obj", dims.h_v, 1);
  a.frame_score = nn::Linear::create(params, name + ".score_frame", dims.h_v, 1);
  a.object_proj = nn::Linear::create(params, name + ".proj_obj", 2 * dims.h_v, dims.h_v);
  a.frame_proj = nn::Linear::create(params, name + ".proj_frame", 2 * dims.h_v, dims.h_v);
  a.relevant_head = nn::Mlp::create(params, name + ".mlp_rel", dims.h_v, dims.h_v, 1);
  a.irrelevant_head = nn::Mlp::create(params, name + ".mlp_irr", dims.h_v, dims.h_v, 1);
  return a;
}

Backbone Backbone::create(ParamStore& params, const std::string& name, std::size_t h_v,
                          std::size_t h_q, std::size_t h) {
  return {nn::Mlp::create(params, name + ".mlp", h_v + h_q, h, h)};
}

Var Backbone::operator()(const Var& motion, const Var& weights, const Var& question) const {
  if (motion.shape().size() != 2 || question.shape().size() != 2) {
    throw ShapeError("backbone expects [n_c, h_v] motion and [n_q, h_q] question");
  }
  const std::size_t n_c = motion.dim(0);
  Var pooled;
  if (weights.defined()) {
    if (weights.shape() != Shape{n_c}) {
      throw ShapeError("backbone clip weights must be [" + std::to_string(n_c) + "], got " +
                       shape_to_string(weights.shape()));
    }
    pooled = ad::div(ad::sum(ad::mul(motion, ad::reshape(weights, {n_c, 1})), 0),
                     ad::sum(weights));
  } else {
    pooled = ad::mean(motion, 0);
  }
  const Var joint = ad::concat({pooled, ad::mean(question, 0)}, 0);
  const Var out = mlp(ad::reshape(joint, {1, joint.size()}));
  return ad::reshape(out, {out.size()});
}

AlignerModel AlignerModel::create(ParamStore& params, const AlignerDims& dims) {
  return {Aligner::create(params, "aligner", dims),
          Backbone::create(params, "backbone", dims.h_v, dims.h_q, dims.h),
          nn::Linear::create(params, "answer_head", dims.h, dims.vocab)};
}

Var project_question(const Var& tokens, const Aligner& aligner) {
  if (tokens.shape().size() != 2 || tokens.dim(0) == 0 || tokens.dim(1) != aligner.dims.h_q) {
    throw ShapeError("question tokens must be [n_q >= 1, " + std::to_string(aligner.dims.h_q) +
                     "], got " + shape_to_string(tokens.shape()));
  }
  return aligner.question_proj(tokens);
}

namespace {

// Scores rows with `score`, softmaxes within groups of `group` consecutive
// rows and returns the weighted row sums, [rows / group, h].
Var attention_pool(const Var& rows, std::size_t group, const nn::Linear& score) {
  const std::size_t n = rows.dim(0) / group, h = rows.dim(1);
  const Var weights = ad::softmax(ad::reshape(score(rows), {n, group}), 1);
  const Var weighted = ad::mul(ad::reshape(rows, {n, group, h}), ad::reshape(weights, {n, group, 1}));
  return ad::sum(weighted, 1);
}

}  // namespace

Var aggregate_objects(const Var& f_o, const Var& f_a, const Var& f_q, const Aligner& aligner) {
  const std::size_t h_v = aligner.dims.h_v;
  if (f_o.shape().size() != 4 || f_o.dim(3) != h_v || f_a.shape().size() != 3 ||
      f_a.dim(0) != f_o.dim(0) || f_a.dim(1) != f_o.dim(1) || f_a.dim(2) != h_v) {
    throw ShapeError("aggregate_objects: got objects " + shape_to_string(f_o.shape()) +
                     " and appearance " + shape_to_string(f_a.shape()));
  }
  const std::size_t n_c = f_o.dim(0), n_f = f_o.dim(1), n_o = f_o.dim(2);
  const Var rows = ad::reshape(f_o, {n_c * n_f * n_o, h_v});
  const Var attended = aligner.object_tf(rows, f_q, f_q);
  const Var pooled = attention_pool(attended, n_o, aligner.object_score);
  const Var out = ad::concat({pooled, ad::reshape(f_a, {n_c * n_f, h_v})}, 1);
  return ad::reshape(out, {n_c, n_f, 2 * h_v});
}

Var aggregate_frames(const Var& f_a_c, const Var& f_m, const Var& f_q, const Aligner& aligner) {
  const std::size_t h_v = aligner.dims.h_v;
  if (f_a_c.shape().size() != 3 || f_a_c.dim(2) != 2 * h_v || f_m.shape().size() != 2 ||
      f_m.dim(0) != f_a_c.dim(0) || f_m.dim(1) != h_v) {
    throw ShapeError("aggregate_frames: got " + shape_to_string(f_a_c.shape()) + " and motion " +
                     shape_to_string(f_m.shape()));
  }
  const std::size_t n_c = f_a_c.dim(0), n_f = f_a_c.dim(1);
  const Var rows = aligner.object_proj(ad::reshape(f_a_c, {n_c * n_f, 2 * h_v}));
  const Var attended = aligner.frame_tf(rows, f_q, f_q);
  const Var pooled = attention_pool(attended, n_f, aligner.frame_score);
  return ad::concat({pooled, f_m}, 1);
}

ClipIndicator indicator_from_logits(const Var& logits, const Tensor& noise, double temperature,
                                    bool hard) {
  ClipIndicator out;
  out.logits = logits;
  const Var soft = nn::gumbel_softmax(logits, noise, temperature, false);
  const std::size_t n_c = logits.dim(0);
  if (hard) {
    Tensor onehot = nn::one_hot_argmax(soft.value());
    bool any = false;
    for (std::size_t c = 0; c < n_c; ++c) any = any || onehot.at(c, 0) == 1.0;
    if (!any) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < n_c; ++c) {
        if (logits.value().at(c, 0) > logits.value().at(best, 0)) best = c;
      }
      onehot.at(best, 0) = 1.0;
      onehot.at(best, 1) = 0.0;
    }
    out.indicator = ad::straight_through(std::move(onehot), soft);
  } else {
    out.indicator = soft;
  }
  // Soft rows are assigned to the larger column.
  for (std::size_t c = 0; c < n_c; ++c) {
    const Tensor& v = out.indicator.value();
    (v.at(c, 0) >= v.at(c, 1) ? out.relevant : out.irrelevant).push_back(c);
  }
  return out;
}

namespace {

Var clip_logits(const Var& f_m_c, const Var& f_q, const Aligner& aligner) {
  const std::size_t h_v = aligner.dims.h_v;
  if (f_m_c.shape().size() != 2 || f_m_c.dim(1) != 2 * h_v) {
    throw ShapeError("clip_indicator expects [n_c, " + std::to_string(2 * h_v) + "], got " +
                     shape_to_string(f_m_c.shape()));
  }
  const Var clips = aligner.clip_tf(aligner.frame_proj(f_m_c), f_q, f_q);
  return ad::concat({aligner.relevant_head(clips), aligner.irrelevant_head(clips)}, 1);
}

}  // namespace

ClipIndicator clip_indicator(const Var& f_m_c, const Var& f_q, const Aligner& aligner,
                             double temperature, bool hard, const Tensor& noise) {
  return indicator_from_logits(clip_logits(f_m_c, f_q, aligner), noise, temperature, hard);
}

ClipIndicator clip_indicator(const Var& f_m_c, const Var& f_q, const Aligner& aligner,
                             double temperature, bool hard, Rng* rng) {
  const Var logits = clip_logits(f_m_c, f_q, aligner);
  const Tensor noise = rng ? nn::sample_gumbel(logits.shape(), *rng) : Tensor(logits.shape());
  return indicator_from_logits(logits, noise, temperature, hard);
}

ClipIndicator select_clips(const VideoFeatures& v, const Tensor& question, const Aligner& aligner,
                           double temperature, bool hard, const Tensor& noise) {
  const Var f_q = project_question(Var::constant(question), aligner);
  const Var f_a_c = aggregate_objects(Var::constant(v.objects), Var::constant(v.appearance), f_q,
                                      aligner);
  const Var f_m_c = aggregate_frames(f_a_c, Var::constant(v.motion), f_q, aligner);
  return clip_indicator(f_m_c, f_q, aligner, temperature, hard, noise);
}

std::vector<ClipSource> sample_replacements(std::size_t slots,
                                            std::span<const VideoFeatures> pool, Rng& rng) {
  if (slots == 0) return {};
  std::size_t total = 0;
  for (const auto& v : pool) total += v.clips();
  if (pool.empty() || total == 0) throw EmptyPoolError("replacement pool has no clips");
  std::vector<ClipSource> out;
  out.reserve(slots);
  for (std::size_t s = 0; s < slots; ++s) {
    std::size_t video = rng.below(pool.size());
    while (pool[video].clips() == 0) video = rng.below(pool.size());
    out.push_back({video, rng.below(pool[video].clips())});
  }
  return out;
}

Tensor replacement_motion(std::span<const ClipSource> sources,
                          std::span<const VideoFeatures> pool) {
  if (sources.empty()) return Tensor(Shape{0, 0});
  const std::size_t h_v = pool[sources.front().video].width();
  Tensor out(Shape{sources.size(), h_v});
  for (std::size_t s = 0; s < sources.size(); ++s) {
    copy_row(out, s, pool[sources[s].video].motion, sources[s].clip);
  }
  return out;
}

VideoViews build_views(const VideoFeatures& v, const ClipIndicator& indicator,
                       std::span<const VideoFeatures> pool, Rng& rng) {
  if (indicator.relevant.empty()) throw EmptyRelevantError("indicator selects no relevant clip");
  VideoViews views;
  views.relevant = v.select_clips(indicator.relevant);
  views.irrelevant = v.select_clips(indicator.irrelevant);
  views.positive = v;
  views.replacements = sample_replacements(indicator.irrelevant.size(), pool, rng);
  for (std::size_t i = 0; i < indicator.irrelevant.size(); ++i) {
    const ClipSource& src = views.replacements[i];
    views.positive.replace_clip(indicator.irrelevant[i], pool[src.video], src.clip);
  }
  return views;
}

Var alignment_contrastive_loss(const Var& anchor, const Var& positive, const Var& negative) {
  const Var sims = ad::concat({ad::reshape(ad::dot(anchor, positive), {1}),
                               ad::reshape(ad::dot(anchor, negative), {1})},
                              0);
  const std::size_t target[] = {0};
  return ad::softmax_cross_entropy(sims, target);
}

namespace {

void answer_from_joint(const AlignerModel& model, std::optional<std::size_t> gold,
                       AlignerStep& step) {
  const Var logits = model.answer_head(ad::reshape(step.joint, {1, step.joint.size()}));
  step.logits = ad::reshape(logits, {logits.size()});
  step.distribution = ad::softmax(step.logits, 0);
  if (gold) step.answer_loss = nn::softmax_cross_entropy(step.logits, *gold);
}

}  // namespace

AlignerStep aligner_answer_and_loss(const AlignerModel& model, const VideoFeatures& v,
                                    const Tensor& question, std::optional<std::size_t> gold,
                                    const Tensor& replacements, const AlignerOptions& options,
                                    const Tensor& noise) {
  return aligner_loss_from_indicator(
      model, v, question, gold, replacements, options,
      select_clips(v, question, model.aligner, options.temperature, options.hard, noise));
}

AlignerStep aligner_loss_from_indicator(const AlignerModel& model, const VideoFeatures& v,
                                        const Tensor& question, std::optional<std::size_t> gold,
                                        const Tensor& replacements,
                                        const AlignerOptions& options, ClipIndicator indicator) {
  const std::size_t n_c = v.clips();
  if (indicator.indicator.shape() != Shape{n_c, 2}) {
    throw ShapeError("indicator must be [" + std::to_string(n_c) + ", 2], got " +
                     shape_to_string(indicator.indicator.shape()));
  }
  AlignerStep step;
  step.indicator = std::move(indicator);
  const Var rel = ad::reshape(ad::slice(step.indicator.indicator, 1, 0, 1), {n_c});
  const Var irr = ad::reshape(ad::slice(step.indicator.indicator, 1, 1, 1), {n_c});
  const Var motion = Var::constant(v.motion);
  const Var q = Var::constant(question);
  step.joint = model.backbone(motion, rel, q);
  answer_from_joint(model, gold, step);

  double irrelevant_mass = 0.0;
  for (double w : irr.value().data()) irrelevant_mass += w;
  if (options.contrastive && irrelevant_mass > 0.0) {
    if (replacements.shape() != v.motion.shape()) {
      throw ShapeError("replacement motion must be " + shape_to_string(v.motion.shape()) +
                       ", got " + shape_to_string(replacements.shape()));
    }
    const Var swapped =
        ad::add(ad::mul(motion, ad::reshape(rel, {n_c, 1})),
                ad::mul(Var::constant(replacements), ad::reshape(irr, {n_c, 1})));
    const Var positive = model.backbone(swapped, Var(), q);
    const Var negative = model.backbone(motion, irr, q);
    step.contrastive = alignment_contrastive_loss(step.joint, positive, negative);
  } else {
    step.contrastive = Var::scalar(0.0);
  }
  if (gold) step.loss = ad::add(step.answer_loss, step.contrastive);
  return step;
}

AlignerStep backbone_answer(const AlignerModel& model, const VideoFeatures& v,
                            const Tensor& question, std::optional<std::size_t> gold) {
  AlignerStep step;
  step.joint = model.backbone(Var::constant(v.motion), Var(), Var::constant(question));
  answer_from_joint(model, gold, step);
  step.contrastive = Var::scalar(0.0);
  if (gold) step.loss = step.answer_loss;
  return step;
}

}  // namespace va3
