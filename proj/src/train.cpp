#include "sfas/train.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "sfas/losses.hpp"
#include "sfas/rng.hpp"
#include "sfas/segmentation.hpp"
#include "sfas/sha256.hpp"

namespace sfas {

namespace {

double now_ms() {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

std::string fmt17(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

Batch make_labeled_batch(const std::vector<Sample>& pool, const std::vector<size_t>& idx,
                         int num_classes) {
  Batch b;
  const Index n = static_cast<Index>(idx.size());
  b.x = Tensor(n, 1, kChip, kChip);
  b.labels.reserve(idx.size());
  b.sample_ids.reserve(idx.size());
  for (Index i = 0; i < n; ++i) {
    const Sample& s = pool[idx[static_cast<size_t>(i)]];
    if (!s.has_label())
      throw std::invalid_argument("make_labeled_batch: sample id " + std::to_string(s.id) +
                                  " has no class label");
    std::memcpy(b.x.plane(i, 0), s.image.data(), sizeof(double) * kChipPixels);
    b.labels.push_back(s.label);
    b.sample_ids.push_back(s.id);
  }
  b.onehot = one_hot(b.labels, num_classes);
  return b;
}

Batch make_unlabeled_batch(const std::vector<Sample>& pool, const std::vector<size_t>& idx) {
  Batch b;
  const Index n = static_cast<Index>(idx.size());
  b.x = Tensor(n, 1, kChip, kChip);
  b.masks = Tensor(n, 1, kChip, kChip);
  b.sample_ids.reserve(idx.size());
  for (Index i = 0; i < n; ++i) {
    const Sample& s = pool[idx[static_cast<size_t>(i)]];
    if (!s.has_mask())
      throw std::invalid_argument("make_unlabeled_batch: sample id " + std::to_string(s.id) +
                                  " has no mask");
    std::memcpy(b.x.plane(i, 0), s.image.data(), sizeof(double) * kChipPixels);
    double* mk = b.masks.plane(i, 0);
    for (int j = 0; j < kChipPixels; ++j) mk[j] = s.mask[static_cast<size_t>(j)] ? 1.0 : 0.0;
    b.sample_ids.push_back(s.id);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

Optimizer::Kind Optimizer::kind_from_string(const std::string& name) {
  if (name == "adam") return Kind::adam;
  if (name == "sgd") return Kind::sgd;
  throw std::invalid_argument("optimizer must be 'adam' or 'sgd', got '" + name + "'");
}

void Optimizer::apply(ModelState& m, Module which) {
  const auto params = module_params(m, which);
  const auto grads = module_grads(m, which);
  for (size_t i = 0; i < params.size(); ++i) {
    Eigen::Map<Eigen::ArrayXd> p(params[i].data, params[i].size);
    Eigen::Map<const Eigen::ArrayXd> g(grads[i].data, grads[i].size);
    if (!g.isFinite().all())
      throw std::runtime_error("optimizer: non-finite gradient in layer '" + params[i].name + "'");
    if (kind == Kind::sgd) {
      p -= lr * g;
      continue;
    }
    AdamSlot& slot = slots[params[i].name];
    if (slot.m.size() != params[i].size) {
      slot.m = Eigen::ArrayXd::Zero(params[i].size);
      slot.v = Eigen::ArrayXd::Zero(params[i].size);
      slot.step = 0;
    }
    slot.step += 1;
    slot.m = beta1 * slot.m + (1.0 - beta1) * g;
    slot.v = beta2 * slot.v + (1.0 - beta2) * g.square();
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(slot.step));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(slot.step));
    p -= lr * (slot.m / c1) / ((slot.v / c2).sqrt() + eps);
  }
}

// ---------------------------------------------------------------------------
// One training loop
// ---------------------------------------------------------------------------

StepResult training_loop_step(ModelState& m, Optimizer& opt, IrlState& irl,
                              const Batch* unlabeled, const Batch& labeled,
                              const TrainConfig& cfg, const PhaseObserver& observer) {
  const long t = irl.t;
  StepResult out;
  out.alpha_t = alpha(t);

  if (cfg.use_segmentation) {
    if (unlabeled == nullptr || unlabeled->size() == 0)
      throw std::invalid_argument("training_loop_step: empty unlabeled batch");
    if (t >= 2 && (!irl.cached_labeled.has_value() || !irl.cached_unlabeled.has_value()))
      throw std::logic_error("training_loop_step: missing loop " + std::to_string(t - 1) +
                             " caches at t=" + std::to_string(t));

    // Phase 1: segmentation side.
    zero_grads(m, Module::extractor);
    zero_grads(m, Module::decoder);
    {
      ExtractorCache ec;
      DecoderCache dc;
      Tensor feats = extractor_forward(m, unlabeled->x, BnMode::train, &ec);
      Tensor logits = decoder_forward(m, feats, BnMode::train, &dc);
      out.seg_loss = segmentation_loss(logits, unlabeled->masks);
      Tensor dlogits = segmentation_loss_grad_logits(logits, unlabeled->masks);
      Tensor dfeat = decoder_backward(m, dc, dlogits, true);
      extractor_backward(m, ec, dfeat, true);
    }
    opt.apply(m, Module::decoder);  // P_D sees only the plain Eq.(2) gradient

    std::optional<double> residue_rec;
    if (t >= 2) {
      const Batch& cached = *irl.cached_labeled;
      ExtractorCache ec;
      ClassifierCache cc;
      Tensor feats = extractor_forward(m, cached.x, BnMode::train_frozen_stats, &ec);
      MatrixXd probs = classifier_forward(m, feats, BnMode::train_frozen_stats, &cc);
      residue_rec = recognition_loss(probs, cached.onehot);
      MatrixXd dlogits = recognition_loss_grad_logits(probs, cached.onehot) * out.alpha_t;
      Tensor dfeat = classifier_backward(m, cc, dlogits, false);  // classifier frozen
      extractor_backward(m, ec, dfeat, true);
    }
    out.seg_irl = irl_segmentation_loss(out.seg_loss, residue_rec, t);
    opt.apply(m, Module::extractor);
  }
  if (observer) observer(1, m);

  // Phase 2: recognition side.
  if (labeled.size() == 0) throw std::invalid_argument("training_loop_step: empty labeled batch");
  zero_grads(m, Module::extractor);
  zero_grads(m, Module::classifier);
  {
    ExtractorCache ec;
    ClassifierCache cc;
    Tensor feats = extractor_forward(m, labeled.x, BnMode::train, &ec);
    MatrixXd probs = classifier_forward(m, feats, BnMode::train, &cc);
    out.rec_loss = recognition_loss(probs, labeled.onehot);
    MatrixXd dlogits = recognition_loss_grad_logits(probs, labeled.onehot);
    Tensor dfeat = classifier_backward(m, cc, dlogits, true);
    extractor_backward(m, ec, dfeat, true);
  }
  opt.apply(m, Module::classifier);  // P_C sees only the plain Eq.(1) gradient

  if (cfg.use_segmentation) {
    std::optional<double> residue_seg;
    if (t >= 2) {
      const Batch& cached = *irl.cached_unlabeled;
      ExtractorCache ec;
      DecoderCache dc;
      Tensor feats = extractor_forward(m, cached.x, BnMode::train_frozen_stats, &ec);
      Tensor logits = decoder_forward(m, feats, BnMode::train_frozen_stats, &dc);
      residue_seg = segmentation_loss(logits, cached.masks);
      Tensor dlog = segmentation_loss_grad_logits(logits, cached.masks);
      dlog.array() *= out.alpha_t;
      Tensor dfeat = decoder_backward(m, dc, dlog, false);  // decoder frozen
      extractor_backward(m, ec, dfeat, true);
    }
    out.rec_irl = irl_recognition_loss(out.rec_loss, residue_seg, t);
  } else {
    out.rec_irl = out.rec_loss;
  }
  opt.apply(m, Module::extractor);
  if (observer) observer(2, m);

  if (cfg.use_segmentation) irl.cached_unlabeled = *unlabeled;
  irl.cached_labeled = labeled;
  irl.prev_rec_loss = out.rec_loss;
  irl.prev_seg_loss = out.seg_loss;
  irl.t += 1;
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

namespace {

std::vector<std::vector<size_t>> chunk_indices(size_t n, int batch_size) {
  std::vector<std::vector<size_t>> chunks;
  for (size_t start = 0; start < n; start += static_cast<size_t>(batch_size)) {
    std::vector<size_t> c;
    for (size_t i = start; i < std::min(n, start + static_cast<size_t>(batch_size)); ++i)
      c.push_back(i);
    chunks.push_back(std::move(c));
  }
  return chunks;
}

}  // namespace

MetricsReport evaluate(ModelState& m, const std::vector<Sample>& test_split, int batch_size) {
  if (test_split.empty()) throw std::invalid_argument("evaluate: empty test split");

  std::vector<int> preds, labels;
  const bool have_labels = test_split.front().has_label();
  const bool have_masks = test_split.front().has_mask();

  std::vector<std::vector<uint8_t>> pred_masks, gt_masks;
  for (const auto& chunk : chunk_indices(test_split.size(), batch_size)) {
    Tensor x(static_cast<Index>(chunk.size()), 1, kChip, kChip);
    for (size_t i = 0; i < chunk.size(); ++i)
      std::memcpy(x.plane(static_cast<Index>(i), 0), test_split[chunk[i]].image.data(),
                  sizeof(double) * kChipPixels);
    Tensor feats = extractor_forward(m, x, BnMode::eval, nullptr);
    if (have_labels) {
      MatrixXd probs = classifier_forward(m, feats, BnMode::eval, nullptr);
      for (Index r = 0; r < probs.rows(); ++r) {
        Index best = 0;
        probs.row(r).maxCoeff(&best);
        preds.push_back(static_cast<int>(best));
        labels.push_back(test_split[chunk[static_cast<size_t>(r)]].label);
      }
    }
    if (have_masks) {
      Tensor logits = decoder_forward(m, feats, BnMode::eval, nullptr);
      for (Index r = 0; r < logits.n(); ++r) {
        std::vector<uint8_t> mask(kChipPixels);
        const double* l0 = logits.plane(r, 0);
        const double* l1 = logits.plane(r, 1);
        for (int j = 0; j < kChipPixels; ++j) mask[static_cast<size_t>(j)] = l1[j] > l0[j] ? 1 : 0;
        pred_masks.push_back(std::move(mask));
        gt_masks.push_back(test_split[chunk[static_cast<size_t>(r)]].mask);
      }
    }
  }

  MetricsReport report;
  if (have_labels) {
    // Class names come from sample meta when distinct; fall back to ids.
    int max_label = 0;
    for (int l : labels) max_label = std::max(max_label, l);
    std::vector<std::string> names(static_cast<size_t>(max_label + 1));
    for (const auto& s : test_split)
      if (s.has_label() && !s.class_name.empty()) names[static_cast<size_t>(s.label)] = s.class_name;
    for (size_t c = 0; c < names.size(); ++c)
      if (names[c].empty()) names[c] = "class" + std::to_string(c);
    report.classification = classification_report(preds, labels, names);
  }
  if (have_masks) report.segmentation = segmentation_report(pred_masks, gt_masks);
  return report;
}

std::vector<std::vector<uint8_t>> predict_masks(ModelState& m, const std::vector<Sample>& samples,
                                                int batch_size) {
  std::vector<std::vector<uint8_t>> out;
  for (const auto& chunk : chunk_indices(samples.size(), batch_size)) {
    Tensor x(static_cast<Index>(chunk.size()), 1, kChip, kChip);
    for (size_t i = 0; i < chunk.size(); ++i)
      std::memcpy(x.plane(static_cast<Index>(i), 0), samples[chunk[i]].image.data(),
                  sizeof(double) * kChipPixels);
    Tensor feats = extractor_forward(m, x, BnMode::eval, nullptr);
    Tensor logits = decoder_forward(m, feats, BnMode::eval, nullptr);
    for (Index r = 0; r < logits.n(); ++r) {
      std::vector<uint8_t> mask(kChipPixels);
      const double* l0 = logits.plane(r, 0);
      const double* l1 = logits.plane(r, 1);
      for (int j = 0; j < kChipPixels; ++j) mask[static_cast<size_t>(j)] = l1[j] > l0[j] ? 1 : 0;
      out.push_back(std::move(mask));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Full run
// ---------------------------------------------------------------------------

std::string history_hash_of(const std::vector<HistoryRow>& history) {
  Sha256 h;
  for (const auto& row : history) {
    const std::string line = std::to_string(row.t) + "," + fmt17(row.rec_irl) + "," +
                             fmt17(row.seg_irl) + "," + fmt17(row.alpha_t) + "\n";
    h.update(line.data(), line.size());
  }
  return h.hex_digest();
}

TrainResult train(const TrainConfig& cfg, const Dataset& raw, const TrainSinks& sinks) {
  if (cfg.batch_size < 1)
    throw std::invalid_argument("train: batch_size must be >= 1, got " +
                                std::to_string(cfg.batch_size));
  if (!(cfg.learning_rate > 0.0))
    throw std::invalid_argument("train: learning_rate must be > 0");
  if (cfg.loops < 1) throw std::invalid_argument("train: loops must be >= 1");

  DatasetSplit split = few_shot_split(raw, cfg.k_labeled_per_class, cfg.seed);

  TrainResult result;
  if (cfg.mask_source != "manual") {
    const AutosegMethod method = autoseg_method_from_string(cfg.mask_source);
    DatasetSplit replaced = make_autoseg_labels(split, method);
    std::vector<std::vector<uint8_t>> auto_masks, gt_masks;
    for (size_t i = 0; i < split.unlabeled.size(); ++i) {
      auto_masks.push_back(replaced.unlabeled[i].mask);
      gt_masks.push_back(split.unlabeled[i].mask);
    }
    if (!auto_masks.empty())
      result.autoseg_quality = segmentation_report(auto_masks, gt_masks);
    split = std::move(replaced);
  }

  if (cfg.use_segmentation && split.unlabeled.empty())
    throw std::invalid_argument(
        "train: unlabeled pool is empty (k covers every sample); segmentation phase "
        "needs unlabeled data or use_segmentation=false");

  ModelState model = init_model(split.num_classes(), derive_seed(cfg.seed, 0x111));
  Optimizer opt;
  opt.kind = Optimizer::kind_from_string(cfg.optimizer);
  opt.lr = cfg.learning_rate;
  IrlState irl;

  Rng rng(derive_seed(cfg.seed, 0x7121));
  const size_t n_labeled = split.labeled.size();
  const size_t n_unlabeled = split.unlabeled.size();
  const bool labeled_with_replacement = n_labeled < static_cast<size_t>(cfg.batch_size);
  const bool unlabeled_with_replacement =
      cfg.use_segmentation && n_unlabeled < static_cast<size_t>(cfg.batch_size);

  std::vector<size_t> labeled_order(n_labeled), unlabeled_order(n_unlabeled);
  for (size_t i = 0; i < n_labeled; ++i) labeled_order[i] = i;
  for (size_t i = 0; i < n_unlabeled; ++i) unlabeled_order[i] = i;
  size_t labeled_pos = n_labeled, unlabeled_pos = n_unlabeled;  // trigger first shuffle

  auto next_indices = [&rng](std::vector<size_t>& order, size_t& pos, size_t pool, int want,
                             bool with_replacement) {
    std::vector<size_t> idx;
    idx.reserve(static_cast<size_t>(want));
    if (with_replacement) {
      for (int i = 0; i < want; ++i) idx.push_back(static_cast<size_t>(rng.below(pool)));
      return idx;
    }
    for (int i = 0; i < want; ++i) {
      if (pos >= order.size()) {
        rng.shuffle(order);
        pos = 0;
      }
      idx.push_back(order[pos++]);
    }
    return idx;
  };

  if (sinks.history_csv) (*sinks.history_csv) << "t,L_r_t,L_s_t,alpha,wall_ms\n";
  if (sinks.evals_csv) (*sinks.evals_csv) << "t,overall_accuracy,seg_iou\n";

  for (long loop = 0; loop < cfg.loops; ++loop) {
    const double t0 = now_ms();

    std::optional<Batch> unlabeled;
    if (cfg.use_segmentation) {
      const auto idx = next_indices(unlabeled_order, unlabeled_pos, n_unlabeled, cfg.batch_size,
                                    unlabeled_with_replacement);
      unlabeled = make_unlabeled_batch(split.unlabeled, idx);
    }
    const auto lidx =
        next_indices(labeled_order, labeled_pos, n_labeled, cfg.batch_size,
                     labeled_with_replacement);
    Batch labeled = make_labeled_batch(split.labeled, lidx, split.num_classes());

    const StepResult step = training_loop_step(
        model, opt, irl, unlabeled.has_value() ? &*unlabeled : nullptr, labeled, cfg);

    HistoryRow row;
    row.t = irl.t - 1;  // the loop counter this step ran at
    row.rec_irl = step.rec_irl;
    row.seg_irl = step.seg_irl;
    row.alpha_t = step.alpha_t;
    row.wall_ms = now_ms() - t0;
    row.rec_loss = step.rec_loss;
    row.seg_loss = step.seg_loss;
    result.history.push_back(row);
    if (sinks.history_csv) {
      (*sinks.history_csv) << row.t << "," << fmt17(row.rec_irl) << "," << fmt17(row.seg_irl)
                           << "," << fmt17(row.alpha_t) << "," << fmt17(row.wall_ms) << "\n";
    }

    const bool last = loop + 1 == cfg.loops;
    if ((cfg.eval_every > 0 && (loop + 1) % cfg.eval_every == 0) || last) {
      MetricsReport rep = evaluate(model, split.test, cfg.batch_size);
      EvalPoint p;
      p.t = row.t;
      if (rep.classification.has_value())
        p.overall_accuracy = rep.classification->overall_accuracy;
      if (rep.segmentation.has_value()) p.seg_iou = rep.segmentation->iou;
      result.evals.push_back(p);
      if (sinks.evals_csv)
        (*sinks.evals_csv) << p.t << "," << fmt17(p.overall_accuracy) << "," << fmt17(p.seg_iou)
                           << "\n";
      if (last) result.final_report = std::move(rep);
    }
  }

  result.history_hash = history_hash_of(result.history);
  result.model = std::move(model);
  return result;
}

}  // namespace sfas
