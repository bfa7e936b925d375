#pragma once

#include <algorithm>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "harness/pipeline.hpp"
#include <json.hpp>

namespace tmg::harness {

// ---------------------------------------------------------------------------
// metric core (model free, fully testable with synthetic predictions)

struct DetPred {
    int64_t scene = 0;
    geo::OrientedBox9 box;
    int64_t cls = 0;
    double score = 0;
};

struct DetGt {
    int64_t scene = 0;
    geo::OrientedBox9 box;
    int64_t cls = 0;
};

struct PrPoint {
    double precision = 0, recall = 0;
};

// Single-category detection PR: predictions sorted by descending score (ties
// keep input order), each greedily matched to the unmatched ground truth of
// the same scene with the highest IoU; a match counts iff IoU >= thr.
inline std::vector<PrPoint> pr_curve(std::vector<DetPred> preds, const std::vector<DetGt>& gts,
                                     double thr) {
    std::stable_sort(preds.begin(), preds.end(),
                     [](const DetPred& a, const DetPred& b) { return a.score > b.score; });
    std::vector<uint8_t> used(gts.size(), 0);
    std::vector<PrPoint> pr;
    int64_t tp = 0, fp = 0;
    for (const auto& p : preds) {
        double best = -1;
        int64_t match = -1;
        for (size_t g = 0; g < gts.size(); ++g) {
            if (used[g] || gts[g].scene != p.scene) continue;
            double v = geo::iou9(p.box, gts[g].box);
            if (v > best) {
                best = v;
                match = int64_t(g);
            }
        }
        if (match >= 0 && best >= thr) {
            used[size_t(match)] = 1;
            ++tp;
        } else {
            ++fp;
        }
        pr.push_back({double(tp) / double(tp + fp),
                      gts.empty() ? 0.0 : double(tp) / double(gts.size())});
    }
    return pr;
}

// All-point interpolated AP: the area under the precision envelope.
inline double ap_from_pr(const std::vector<PrPoint>& pr) {
    double ap = 0, last_recall = 0;
    for (size_t i = 0; i < pr.size(); ++i) {
        double p_env = 0;
        for (size_t j = i; j < pr.size(); ++j) p_env = std::max(p_env, pr[j].precision);
        ap += (pr[i].recall - last_recall) * p_env;
        last_recall = pr[i].recall;
    }
    return ap;
}

struct ApAr {
    double ap = 0, ar = 0;
};

inline ApAr detection_ap(const std::vector<DetPred>& preds, const std::vector<DetGt>& gts,
                         double thr) {
    if (gts.empty()) return {};
    auto pr = pr_curve(preds, gts, thr);
    ApAr out;
    out.ap = ap_from_pr(pr);
    out.ar = pr.empty() ? 0.0 : pr.back().recall;
    return out;
}

// ---------------------------------------------------------------------------
// results

struct SplitMetrics {
    double ap25 = 0, ap50 = 0, ar25 = 0, ar50 = 0;
    int64_t count = 0;  // prompts (grounding) or ground-truth boxes (detection)
};

struct EvalResult {
    head::Task task = head::Task::ground;
    SplitMetrics overall;
    SplitMetrics easy, hard;            // by n_distractors > 3 (grounding only)
    SplitMetrics view_indep, view_dep;  // by prompt flag (grounding only)
    SplitMetrics grp_head, grp_common, grp_tail;  // by category frequency

    nlohmann::json to_json() const {
        auto sm = [](const SplitMetrics& s) {
            return nlohmann::json{{"ap25", s.ap25}, {"ap50", s.ap50},  {"ar25", s.ar25},
                                  {"ar50", s.ar50}, {"count", s.count}};
        };
        return {{"task", task == head::Task::ground ? "ground" : "detect"},
                {"overall", sm(overall)},
                {"easy", sm(easy)},
                {"hard", sm(hard)},
                {"view_indep", sm(view_indep)},
                {"view_dep", sm(view_dep)},
                {"head", sm(grp_head)},
                {"common", sm(grp_common)},
                {"tail", sm(grp_tail)}};
    }

    std::string table() const {
        std::ostringstream os;
        os.setf(std::ios::fixed);
        os.precision(4);
        auto row = [&](const char* name, const SplitMetrics& s) {
            os << name;
            for (size_t i = std::string(name).size(); i < 12; ++i) os << ' ';
            os << "AP@0.25 " << s.ap25 << "  AP@0.5 " << s.ap50 << "  AR@0.25 " << s.ar25
               << "  AR@0.5 " << s.ar50 << "  n=" << s.count << "\n";
        };
        row("overall", overall);
        if (task == head::Task::ground) {
            row("easy", easy);
            row("hard", hard);
            row("view-indep", view_indep);
            row("view-dep", view_dep);
        }
        row("head", grp_head);
        row("common", grp_common);
        row("tail", grp_tail);
        return os.str();
    }
};

namespace detail {

// categories ranked by ground-truth frequency (desc, id breaks ties) and cut
// into thirds: the most frequent third is "head", then "common", then "tail"
inline std::vector<int> category_groups(const std::vector<int64_t>& counts) {
    std::vector<int64_t> present;
    for (int64_t c = 0; c < int64_t(counts.size()); ++c)
        if (counts[size_t(c)] > 0) present.push_back(c);
    std::sort(present.begin(), present.end(), [&](int64_t a, int64_t b) {
        if (counts[size_t(a)] != counts[size_t(b)]) return counts[size_t(a)] > counts[size_t(b)];
        return a < b;
    });
    std::vector<int> group(counts.size(), -1);
    int64_t n = int64_t(present.size());
    int64_t h = (n + 2) / 3, c = (n + 1) / 3;
    for (int64_t i = 0; i < n; ++i)
        group[size_t(present[size_t(i)])] = i < h ? 0 : (i < h + c ? 1 : 2);
    return group;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// grounding evaluation: a prompt scores iff the top-1 box overlaps its target
// with IoU >= threshold; AP is accuracy over prompts (and AR equals AP since
// exactly one box is kept per prompt)

struct GroundingRecord {
    int64_t category = 0;
    bool view_dependent = false;
    int64_t n_distractors = 0;
    double iou = 0;
};

inline EvalResult grounding_metrics(const std::vector<GroundingRecord>& records) {
    EvalResult r;
    r.task = head::Task::ground;
    std::vector<int64_t> cat_counts(kCategories, 0);
    for (const auto& rec : records) ++cat_counts[size_t(rec.category)];
    auto groups = detail::category_groups(cat_counts);

    auto fold = [](SplitMetrics& s, const GroundingRecord& rec) {
        s.ap25 += rec.iou >= 0.25 ? 1 : 0;
        s.ap50 += rec.iou >= 0.5 ? 1 : 0;
        ++s.count;
    };
    for (const auto& rec : records) {
        fold(r.overall, rec);
        fold(rec.n_distractors > 3 ? r.hard : r.easy, rec);
        fold(rec.view_dependent ? r.view_dep : r.view_indep, rec);
        int g = groups[size_t(rec.category)];
        fold(g == 0 ? r.grp_head : (g == 1 ? r.grp_common : r.grp_tail), rec);
    }
    for (SplitMetrics* s : {&r.overall, &r.easy, &r.hard, &r.view_indep, &r.view_dep, &r.grp_head,
                            &r.grp_common, &r.grp_tail}) {
        if (s->count) {
            s->ap25 /= double(s->count);
            s->ap50 /= double(s->count);
        }
        s->ar25 = s->ap25;
        s->ar50 = s->ap50;
    }
    return r;
}

// ---------------------------------------------------------------------------
// detection evaluation: macro average of per-category all-point AP

inline EvalResult detection_metrics(const std::vector<DetPred>& preds,
                                    const std::vector<DetGt>& gts) {
    EvalResult r;
    r.task = head::Task::detect;
    std::vector<int64_t> cat_counts(kCategories, 0);
    for (const auto& g : gts) ++cat_counts[size_t(g.cls)];
    auto groups = detail::category_groups(cat_counts);

    struct Acc {
        double ap25 = 0, ap50 = 0, ar25 = 0, ar50 = 0;
        int64_t cats = 0, boxes = 0;
    };
    Acc overall;
    std::array<Acc, 3> grp;
    for (int64_t c = 0; c < kCategories; ++c) {
        if (cat_counts[size_t(c)] == 0) continue;
        std::vector<DetPred> cp;
        std::vector<DetGt> cg;
        for (const auto& p : preds)
            if (p.cls == c) cp.push_back(p);
        for (const auto& g : gts)
            if (g.cls == c) cg.push_back(g);
        auto m25 = detection_ap(cp, cg, 0.25);
        auto m50 = detection_ap(cp, cg, 0.5);
        for (Acc* a : {&overall, &grp[size_t(groups[size_t(c)])]}) {
            a->ap25 += m25.ap;
            a->ap50 += m50.ap;
            a->ar25 += m25.ar;
            a->ar50 += m50.ar;
            ++a->cats;
            a->boxes += cat_counts[size_t(c)];
        }
    }
    auto to_split = [](const Acc& a) {
        SplitMetrics s;
        if (a.cats) {
            s.ap25 = a.ap25 / double(a.cats);
            s.ap50 = a.ap50 / double(a.cats);
            s.ar25 = a.ar25 / double(a.cats);
            s.ar50 = a.ar50 / double(a.cats);
        }
        s.count = a.boxes;
        return s;
    };
    r.overall = to_split(overall);
    r.grp_head = to_split(grp[0]);
    r.grp_common = to_split(grp[1]);
    r.grp_tail = to_split(grp[2]);
    return r;
}

// ---------------------------------------------------------------------------
// model-driven evaluation

struct EvalOptions {
    head::Task task = head::Task::ground;
    bool use_garf = true;
    bool use_2d = true;
    int64_t views = -1;  // -1: config views_eval
    double det_threshold = 0.1;
};

inline EvalResult evaluate(Model& m, const std::vector<Scene>& scenes, const EvalOptions& opts) {
    check(!scenes.empty(), "evaluate: empty dataset");
    int64_t views = opts.views > 0 ? opts.views : m.cfg.data.views_eval;
    RunFlags flags{opts.task, opts.use_garf, opts.use_2d, false};

    if (opts.task == head::Task::ground) {
        std::vector<GroundingRecord> records;
        for (const auto& sc : scenes) {
            auto in = make_scene_input(sc, m.cfg, views);
            for (const auto& pr : sc.prompts) {
                ta::Graph<double> g;
                auto out = forward(m, in, pr.text, nullptr, flags);
                auto pick = head::pick_grounding(out.preds.back(), out.qs);
                const auto& gt = sc.objects[size_t(pr.target)].box;
                records.push_back(
                    {sc.objects[size_t(pr.target)].category, pr.view_dependent, pr.n_distractors,
                     geo::iou9(pick.box, gt)});
            }
        }
        return grounding_metrics(records);
    }

    std::vector<DetPred> preds;
    std::vector<DetGt> gts;
    for (size_t si = 0; si < scenes.size(); ++si) {
        const auto& sc = scenes[si];
        auto in = make_scene_input(sc, m.cfg, views);
        ta::Graph<double> g;
        auto out = forward(m, in, "", nullptr, flags);
        for (const auto& det : head::pick_detections(out.preds.back(), out.qs, opts.det_threshold))
            preds.push_back({int64_t(si), det.box, det.cls, det.score});
        for (const auto& o : sc.objects) gts.push_back({int64_t(si), o.box, o.category});
    }
    return detection_metrics(preds, gts);
}

// Ground-truth boxes replayed as predictions — a fixture for validating the
// metric plumbing end to end (perfect predictions must score AP = 1).
inline EvalResult evaluate_fixture(const std::vector<Scene>& scenes, head::Task task) {
    if (task == head::Task::detect) {
        std::vector<DetPred> preds;
        std::vector<DetGt> gts;
        for (size_t si = 0; si < scenes.size(); ++si)
            for (const auto& o : scenes[si].objects) {
                preds.push_back({int64_t(si), o.box, o.category, 1.0});
                gts.push_back({int64_t(si), o.box, o.category});
            }
        return detection_metrics(preds, gts);
    }
    std::vector<GroundingRecord> records;
    for (const auto& sc : scenes)
        for (const auto& pr : sc.prompts)
            records.push_back({sc.objects[size_t(pr.target)].category, pr.view_dependent,
                               pr.n_distractors, 1.0});
    return grounding_metrics(records);
}

}  // namespace tmg::harness
