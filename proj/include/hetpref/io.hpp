#pragma once

// JSON serialization of universes, datasets, mixtures, policies and reports.
// Ids are written as the universe's string names; field order is stable.

#include "hetpref/aggregate.hpp"
#include "hetpref/core.hpp"
#include "hetpref/data_gen.hpp"
#include "hetpref/em.hpp"
#include "hetpref/identify.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace hetpref::io {

using Json = nlohmann::ordered_json;

inline Json to_json(const Vector& v) {
    Json a = Json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
    return a;
}

inline Json to_json(const Matrix& m) {
    Json a = Json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) a.push_back(to_json(Vector(m.row(r).transpose())));
    return a;
}

inline Vector vector_from(const Json& j) {
    if (!j.is_array()) throw DataError("expected a numeric array");
    Vector v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) {
        if (!j[i].is_number()) throw DataError("expected a numeric array");
        v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
    }
    return v;
}

inline Matrix matrix_from(const Json& j) {
    if (!j.is_array()) throw DataError("expected an array of rows");
    if (j.empty()) return Matrix(0, 0);
    const auto cols = static_cast<Eigen::Index>(j[0].size());
    Matrix m(static_cast<Eigen::Index>(j.size()), cols);
    for (std::size_t r = 0; r < j.size(); ++r) {
        const Vector row = vector_from(j[r]);
        if (row.size() != cols) throw DataError("ragged matrix rows");
        m.row(static_cast<Eigen::Index>(r)) = row.transpose();
    }
    return m;
}

/// Field access with a data error naming the missing key.
inline const Json& field(const Json& j, const char* key) {
    if (!j.is_object() || !j.contains(key)) throw DataError(std::string("missing field '") + key + "'");
    return j.at(key);
}

inline Json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    try {
        return Json::parse(in);
    } catch (const Json::parse_error& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline void write_json(const std::filesystem::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

// ---- universe ---------------------------------------------------------------

struct LoadedUniverse {
    ResponseUniverse universe;
    ReferencePolicy sft;
};

inline Json universe_to_json(const ResponseUniverse& u, const ReferencePolicy& sft) {
    Json prompts = Json::array();
    Json probs = Json::object();
    for (PromptId x = 0; x < u.num_prompts(); ++x) {
        const Prompt& p = u.prompt(x);
        Json cands = Json::array();
        Json px = Json::object();
        for (ResponseId y = 0; y < p.candidates.size(); ++y) {
            cands.push_back({{"id", p.candidates[y].id}, {"features", to_json(p.candidates[y].features)}});
            px[p.candidates[y].id] = sft.prob(x, y);
        }
        prompts.push_back({{"id", p.id}, {"candidates", std::move(cands)}});
        probs[p.id] = std::move(px);
    }
    return {{"d", u.dim()}, {"prompts", std::move(prompts)}, {"sft", std::move(probs)}};
}

/// A missing "sft" block means the uniform reference policy.
inline LoadedUniverse universe_from_json(const Json& j) {
    std::vector<Prompt> prompts;
    for (const auto& pj : field(j, "prompts")) {
        Prompt p{field(pj, "id").get<std::string>(), {}};
        for (const auto& cj : field(pj, "candidates"))
            p.candidates.push_back({field(cj, "id").get<std::string>(), vector_from(field(cj, "features"))});
        prompts.push_back(std::move(p));
    }
    LoadedUniverse out{ResponseUniverse(std::move(prompts)), {}};
    if (j.contains("d") && field(j, "d").get<std::size_t>() != out.universe.dim())
        throw DataError("declared d does not match candidate features");
    if (!j.contains("sft")) {
        out.sft = ReferencePolicy::uniform(out.universe);
        return out;
    }
    const Json& sj = j.at("sft");
    std::vector<Vector> probs;
    for (PromptId x = 0; x < out.universe.num_prompts(); ++x) {
        const Prompt& p = out.universe.prompt(x);
        const Json& px = field(sj, p.id.c_str());
        Vector v(static_cast<Eigen::Index>(p.candidates.size()));
        for (ResponseId y = 0; y < p.candidates.size(); ++y)
            v(static_cast<Eigen::Index>(y)) = field(px, p.candidates[y].id.c_str()).get<double>();
        if (px.size() != p.candidates.size()) throw DataError("sft lists unknown responses at prompt '" + p.id + "'");
        probs.push_back(std::move(v));
    }
    out.sft = ReferencePolicy(out.universe, std::move(probs));
    return out;
}

// ---- records and datasets -----------------------------------------------------

inline Json record_body(const PreferenceRecord& r, const ResponseUniverse& u) {
    const Prompt& p = u.prompt(r.prompt);
    Json rej = Json::array();
    for (auto y : r.rejected) rej.push_back(p.candidates.at(y).id);
    return {{"prompt", p.id}, {"winner", p.candidates.at(r.winner).id}, {"rejected", std::move(rej)}};
}

inline PreferenceRecord record_from(const Json& j, const ResponseUniverse& u, AnnotatorId a) {
    PreferenceRecord r;
    r.annotator = a;
    r.prompt = u.prompt_index(field(j, "prompt").get<std::string>());
    r.winner = u.response_index(r.prompt, field(j, "winner").get<std::string>());
    const Json& rej = field(j, "rejected");
    if (!rej.is_array()) throw DataError("'rejected' must be a list");
    for (const auto& y : rej) r.rejected.push_back(u.response_index(r.prompt, y.get<std::string>()));
    validate(r, u);
    return r;
}

inline Json dataset_to_json(const AnnotatorDataset& data, const ResponseUniverse& u,
                            const std::vector<std::size_t>& true_labels = {},
                            const std::vector<std::string>& type_names = {}) {
    Json recs = Json::array();
    for (const auto& r : data.records()) {
        Json body = record_body(r, u);
        Json row = {{"annotator", data.annotator_names().at(r.annotator)}};
        for (auto& [k, v] : body.items()) row[k] = v;
        recs.push_back(std::move(row));
    }
    Json j = {{"records", std::move(recs)}};
    if (!true_labels.empty()) {
        Json labels = Json::object();
        for (AnnotatorId a = 0; a < data.num_annotators(); ++a)
            labels[data.annotator_names()[a]] = type_names.at(true_labels.at(a));
        j["true_labels"] = std::move(labels);
    }
    return j;
}

inline Json dataset_to_json(const LabeledDataset& d, const ResponseUniverse& u) {
    return dataset_to_json(d.data, u, d.true_labels, d.type_names);
}

/// Annotators are numbered in order of first appearance. Type names, when
/// labels are present, are numbered in order of first appearance too unless
/// `type_order` fixes them.
inline LabeledDataset dataset_from_json(const Json& j, const ResponseUniverse& u,
                                        const std::vector<std::string>& type_order = {}) {
    std::vector<std::string> names;
    std::map<std::string, AnnotatorId> index;
    std::vector<PreferenceRecord> records;
    const Json& recs = field(j, "records");
    if (!recs.is_array()) throw DataError("'records' must be a list");
    for (const auto& rj : recs) {
        const auto name = field(rj, "annotator").get<std::string>();
        auto [it, fresh] = index.try_emplace(name, names.size());
        if (fresh) names.push_back(name);
        records.push_back(record_from(rj, u, it->second));
    }
    LabeledDataset out;
    out.data = AnnotatorDataset(names, std::move(records));
    if (j.contains("true_labels")) {
        out.type_names = type_order;
        const Json& lj = j.at("true_labels");
        for (const auto& name : names) {
            const auto type = field(lj, name.c_str()).get<std::string>();
            auto pos = std::find(out.type_names.begin(), out.type_names.end(), type);
            if (pos == out.type_names.end()) {
                if (!type_order.empty()) throw DataError("unknown type label '" + type + "'");
                pos = out.type_names.insert(out.type_names.end(), type);
            }
            out.true_labels.push_back(static_cast<std::size_t>(pos - out.type_names.begin()));
        }
    }
    return out;
}

inline Json eval_to_json(const EvalPairSet& e, const ResponseUniverse& u) {
    Json groups = Json::array();
    for (std::size_t g = 0; g < e.groups.size(); ++g) {
        Json pairs = Json::array();
        for (const auto& r : e.groups[g]) pairs.push_back(record_body(r, u));
        groups.push_back({{"name", e.group_names[g]}, {"pairs", std::move(pairs)}});
    }
    return {{"groups", std::move(groups)}};
}

inline EvalPairSet eval_from_json(const Json& j, const ResponseUniverse& u) {
    EvalPairSet e;
    for (const auto& gj : field(j, "groups")) {
        e.group_names.push_back(field(gj, "name").get<std::string>());
        std::vector<PreferenceRecord> pairs;
        for (const auto& pj : field(gj, "pairs")) pairs.push_back(record_from(pj, u, e.groups.size()));
        e.groups.push_back(std::move(pairs));
    }
    e.validate(u);
    return e;
}

// ---- policies and mixtures ------------------------------------------------------

inline Json policy_to_json(const LinearPolicy& p) { return {{"theta", to_json(p.theta)}}; }

inline LinearPolicy policy_from_json(const Json& j) { return LinearPolicy{vector_from(field(j, "theta"))}; }

inline Json ensemble_to_json(const EnsemblePolicy& e) {
    Json comps = Json::array();
    for (const auto& c : e.components) comps.push_back(policy_to_json(c));
    return {{"policies", std::move(comps)}, {"weights", to_json(e.weights)}};
}

inline EnsemblePolicy ensemble_from_json(const Json& j) {
    EnsemblePolicy e;
    for (const auto& c : field(j, "policies")) e.components.push_back(policy_from_json(c));
    e.weights = vector_from(field(j, "weights"));
    e.validate();
    return e;
}

inline Json mixture_to_json(const MixtureState& s) {
    Json pols = Json::array();
    for (const auto& p : s.policies) pols.push_back(policy_to_json(p));
    Json trace = Json::array();
    for (double v : s.loglik_trace) trace.push_back(v);
    return {{"K", s.K()},
            {"eta", to_json(s.eta)},
            {"policies", std::move(pols)},
            {"gamma", to_json(s.gamma)},
            {"loglik_trace", std::move(trace)}};
}

inline MixtureState mixture_from_json(const Json& j) {
    MixtureState s;
    for (const auto& p : field(j, "policies")) s.policies.push_back(policy_from_json(p));
    s.eta = vector_from(field(j, "eta"));
    s.gamma = matrix_from(field(j, "gamma"));
    for (const auto& v : field(j, "loglik_trace")) s.loglik_trace.push_back(v.get<double>());
    const auto K = field(j, "K").get<std::size_t>();
    if (K != s.policies.size() || s.eta.size() != static_cast<Eigen::Index>(K) ||
        (s.gamma.size() > 0 && s.gamma.cols() != static_cast<Eigen::Index>(K)))
        throw DataError("mixture file is inconsistent with K");
    s.frozen.assign(K, false);
    return s;
}

// ---- reports ------------------------------------------------------------------

struct AggregationReport {
    std::string method;
    Vector w;
    Matrix regret_matrix;
    Vector regret_signed;
    std::optional<double> duality_gap;
    std::optional<double> gap_bound;
    std::vector<MwuTracePoint> trace;
};

inline Json report_to_json(const AggregationReport& r) {
    Json trace = Json::array();
    for (const auto& t : r.trace) trace.push_back({{"t", t.t}, {"w", to_json(t.w)}, {"max_regret", t.max_regret}});
    Json j = {{"method", r.method},
              {"w", to_json(r.w)},
              {"regret_matrix", to_json(r.regret_matrix)},
              {"per_group_regret_signed", to_json(r.regret_signed)},
              {"per_group_regret_clamped", to_json(clamp_positive(r.regret_signed))}};
    j["duality_gap"] = r.duality_gap ? Json(*r.duality_gap) : Json(nullptr);
    if (r.gap_bound) j["duality_gap_bound"] = *r.gap_bound;
    j["trace"] = std::move(trace);
    return j;
}

inline Json identify_to_json(const IdentifyReport& r) {
    Json acc = Json::object();
    for (const auto& [g, a] : r.accuracies) acc[g] = a;
    Json align = Json::array();
    for (double a : r.alignments) align.push_back(a);
    Json matching = Json::array();
    for (auto m : r.matching) matching.push_back(m);
    return {{"mode", r.mode},
            {"eta_error", r.eta_error},
            {"alignments", std::move(align)},
            {"matching", std::move(matching)},
            {"accuracies", std::move(acc)},
            {"gap_checks",
             {{"binary_confusion", r.gap_checks.binary_confusion},
              {"binary_gap", r.gap_checks.binary_gap},
              {"ternary_gap", r.gap_checks.ternary_gap},
              {"canonical_ternary_gap", r.gap_checks.canonical_ternary_gap}}},
            {"zero_heterogeneity", r.zero_heterogeneity},
            {"assumptions", r.assumptions},
            {"eta", to_json(r.mixture.eta)},
            {"loglik_trace", r.mixture.loglik_trace}};
}

inline Json types_to_json(const LatentTypeSpec& t) {
    Json types = Json::array();
    for (std::size_t k = 0; k < t.size(); ++k)
        types.push_back({{"name", t.names[k]}, {"beta", to_json(t.betas[k].beta)}, {"mixing", t.mixing(static_cast<Eigen::Index>(k))}});
    return types;
}

inline LatentTypeSpec types_from_json(const Json& j) {
    LatentTypeSpec t;
    std::vector<double> mix;
    for (const auto& tj : j) {
        t.names.push_back(field(tj, "name").get<std::string>());
        t.betas.push_back({vector_from(field(tj, "beta"))});
        mix.push_back(field(tj, "mixing").get<double>());
    }
    t.mixing = Eigen::Map<const Vector>(mix.data(), static_cast<Eigen::Index>(mix.size()));
    return t;
}

inline Json prompt_ids(const ResponseUniverse& u, const std::vector<PromptId>& xs) {
    Json a = Json::array();
    for (auto x : xs) a.push_back(u.prompt(x).id);
    return a;
}

inline std::vector<PromptId> prompt_ids_from(const Json& j, const ResponseUniverse& u) {
    std::vector<PromptId> xs;
    for (const auto& id : j) xs.push_back(u.prompt_index(id.get<std::string>()));
    return xs;
}

inline Json world_to_json(const World& w) {
    return {{"kind", w.kind},
            {"protocol", w.protocol == ChoiceProtocol::subset_logit ? "subset_logit" : "full_set_then_reject"},
            {"types", types_to_json(w.types)},
            {"train_prompts", prompt_ids(w.universe, w.train_prompts)},
            {"eval_prompts", prompt_ids(w.universe, w.eval_prompts)}};
}

/// Rebuilds a world from its description and universe.
inline World world_from_json(const Json& j, LoadedUniverse u) {
    World w{field(j, "kind").get<std::string>(), std::move(u.universe), std::move(u.sft), {}, {}, {}, {}};
    const auto proto = field(j, "protocol").get<std::string>();
    if (proto == "subset_logit") w.protocol = ChoiceProtocol::subset_logit;
    else if (proto == "full_set_then_reject") w.protocol = ChoiceProtocol::full_set_then_reject;
    else throw DataError("unknown choice protocol '" + proto + "'");
    w.types = types_from_json(field(j, "types"));
    w.types.validate(w.universe.dim());
    w.train_prompts = prompt_ids_from(field(j, "train_prompts"), w.universe);
    w.eval_prompts = prompt_ids_from(field(j, "eval_prompts"), w.universe);
    return w;
}

}  // namespace hetpref::io
