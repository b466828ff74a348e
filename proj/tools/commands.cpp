#include "commands.hpp"

#include <CLI11.hpp>
#include <openssl/evp.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <initializer_list>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

namespace hetpref::cli {

namespace {

using io::Json;

// ---- config parsing -----------------------------------------------------------

void check_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& section) {
    if (!j.is_object()) throw ConfigError("config section '" + section + "' must be an object");
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& item : j.items())
        if (!ok.count(item.key())) throw ConfigError("unknown key '" + item.key() + "' in config section '" + section + "'");
}

template <class T>
T get_or(const Json& j, const char* key, T fallback) {
    if (!j.contains(key) || j.at(key).is_null()) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const Json::exception&) {
        throw ConfigError(std::string("config key '") + key + "' has the wrong type");
    }
}

std::size_t positive(const Json& j, const char* key, std::size_t fallback) {
    const auto v = get_or<long long>(j, key, static_cast<long long>(fallback));
    if (v < 1) throw ConfigError(std::string("config key '") + key + "' must be >= 1");
    return static_cast<std::size_t>(v);
}

InitMode parse_init(const std::string& s) {
    if (s == "kmeans") return InitMode::kmeans;
    if (s == "random") return InitMode::random;
    throw ConfigError("em.init must be 'kmeans' or 'random'");
}

const std::array<const char*, 4> kMethods{"uniform", "mmra_ae", "mmra_lw", "mmra_full"};

void check_method(const std::string& m) {
    for (const char* k : kMethods)
        if (m == k) return;
    throw ConfigError("unknown aggregation method '" + m + "' (expected uniform, mmra_ae, mmra_lw or mmra_full)");
}

LatentTypeSpec parse_types(const Json& j, std::size_t d) {
    if (!j.is_array() || j.empty()) throw ConfigError("'types' must be a nonempty list");
    LatentTypeSpec t;
    std::vector<double> mix;
    for (const auto& tj : j) {
        check_keys(tj, {"name", "beta", "mixing"}, "types");
        if (!tj.contains("name") || !tj.contains("beta") || !tj.contains("mixing"))
            throw ConfigError("each type needs name, beta and mixing");
        t.names.push_back(tj["name"].get<std::string>());
        try {
            t.betas.push_back({io::vector_from(tj["beta"])});
        } catch (const DataError& e) {
            throw ConfigError(std::string("type beta: ") + e.what());
        }
        mix.push_back(tj["mixing"].get<double>());
    }
    t.mixing = Eigen::Map<const Vector>(mix.data(), static_cast<Eigen::Index>(mix.size()));
    t.validate(d);
    return t;
}

// ---- artifacts ----------------------------------------------------------------

struct Artifacts {
    World world;
    LabeledDataset dataset;
};

fs::path need(const fs::path& p) {
    if (!fs::exists(p)) throw DataError("missing input " + p.string() + " (run the upstream command first)");
    return p;
}

World load_world(const fs::path& out) {
    auto u = io::universe_from_json(io::read_json(need(out / "universe.json")));
    return io::world_from_json(io::read_json(need(out / "world.json")), std::move(u));
}

Artifacts load_artifacts(const fs::path& out) {
    Artifacts a{load_world(out), {}};
    a.dataset = io::dataset_from_json(io::read_json(need(out / "dataset.json")), a.world.universe, a.world.types.names);
    a.dataset.data.validate(a.world.universe);
    return a;
}

std::vector<LinearPolicy> policies_from(const Json& j) {
    std::vector<LinearPolicy> out;
    for (const auto& p : io::field(j, "policies")) out.push_back(io::policy_from_json(p));
    return out;
}

void check_policy_dims(const std::vector<LinearPolicy>& ps, const ResponseUniverse& u) {
    for (const auto& p : ps) check_dim(p, u);
}

void write_text(const fs::path& p, const std::string& s) { io::write_text(p, s); }

void ensure_out(const ExperimentConfig& c) {
    std::error_code ec;
    fs::create_directories(c.out, ec);
    if (ec || !fs::is_directory(c.out)) throw std::runtime_error("cannot create output directory " + c.out.string());
}

std::string tsv_number(double v) { return format_number(v); }

}  // namespace

// ---- config -------------------------------------------------------------------------

ExperimentConfig load_config(const Options& options) {
    ExperimentConfig c;
    Json j = Json::object();
    fs::path base = fs::current_path();
    if (options.config) {
        if (!fs::exists(*options.config)) throw ConfigError("config file not found: " + options.config->string());
        try {
            std::ifstream in(*options.config);
            j = Json::parse(in);
        } catch (const Json::exception& e) {
            throw ConfigError("cannot parse config: " + std::string(e.what()));
        }
        base = fs::absolute(*options.config).parent_path();
    }
    check_keys(j, {"seed", "out", "world", "generator", "train", "em", "aggregate", "baselines", "identify", "sweep"},
               "top level");

    if (options.seed) c.seed = *options.seed;
    else if (j.contains("seed")) c.seed = get_or<std::uint64_t>(j, "seed", 0);
    else throw ConfigError("a seed is required (config 'seed' or --seed)");

    if (options.out) c.out = *options.out;
    else if (j.contains("out")) c.out = base / get_or<std::string>(j, "out", "");
    else throw ConfigError("an output directory is required (config 'out' or --out)");

    c.world = get_or<Json>(j, "world", Json::object());
    if (c.world.contains("universe") && c.world["universe"].is_string()) {
        fs::path p = c.world["universe"].get<std::string>();
        if (p.is_relative()) c.world["universe"] = (base / p).string();
    }

    const Json g = get_or<Json>(j, "generator", Json::object());
    check_keys(g, {"n_annotators", "records_per_annotator", "items_per_choice", "eval_pairs_per_group",
                   "validation_pairs_per_group"},
               "generator");
    c.generator.n_annotators = positive(g, "n_annotators", 200);
    if (g.contains("records_per_annotator") && g["records_per_annotator"].is_array())
        c.generator.records_per_annotator = g["records_per_annotator"].get<std::vector<std::size_t>>();
    else
        c.generator.records_per_annotator = {positive(g, "records_per_annotator", 4)};
    c.generator.items_per_choice = positive(g, "items_per_choice", 2);
    c.generator.validate();
    c.eval_pairs_per_group = positive(g, "eval_pairs_per_group", 500);
    c.validation_pairs_per_group = positive(g, "validation_pairs_per_group", 200);

    const Json t = get_or<Json>(j, "train", Json::object());
    check_keys(t, {"beta_kl", "step_size", "max_iters", "grad_tol"}, "train");
    c.train.beta_kl = KlTemperature(get_or<double>(t, "beta_kl", 0.1));
    c.train.step_size = get_or<double>(t, "step_size", 1.0);
    c.train.max_iters = positive(t, "max_iters", 10000);
    c.train.grad_tol = get_or<double>(t, "grad_tol", 1e-8);
    c.train.validate();

    const Json e = get_or<Json>(j, "em", Json::object());
    check_keys(e, {"K", "iterations", "init", "threads"}, "em");
    c.em.K = positive(e, "K", 2);
    c.em.iterations = positive(e, "iterations", 5);
    c.em.init = parse_init(get_or<std::string>(e, "init", "kmeans"));
    c.em.threads = positive(e, "threads", 1);
    c.em.seed = c.seed;
    c.em.train = c.train;

    const Json a = get_or<Json>(j, "aggregate", Json::object());
    check_keys(a, {"method", "hedge_iterations", "hedge_step", "lw", "full"}, "aggregate");
    c.aggregate.method = options.method.value_or(get_or<std::string>(a, "method", "mmra_ae"));
    check_method(c.aggregate.method);
    c.aggregate.hedge_iterations = positive(a, "hedge_iterations", 5000);
    if (a.contains("hedge_step") && !a["hedge_step"].is_null()) {
        c.aggregate.hedge_step = get_or<double>(a, "hedge_step", 0.0);
        if (!(*c.aggregate.hedge_step > 0.0)) throw ConfigError("aggregate.hedge_step must be positive");
    }
    const Json lw = get_or<Json>(a, "lw", Json::object());
    check_keys(lw, {"mwu_eta", "iterations", "steps_per_iter"}, "aggregate.lw");
    c.aggregate.lw.mwu_eta = get_or<double>(lw, "mwu_eta", 0.01);
    c.aggregate.lw.iterations = positive(lw, "iterations", 20);
    c.aggregate.lw.steps_per_iter = positive(lw, "steps_per_iter", 250);
    c.aggregate.lw.train = c.train;
    const Json fu = get_or<Json>(a, "full", Json::object());
    check_keys(fu, {"prompt_sample", "gen_per_prompt", "iterations", "inner_steps", "mwu_eta", "policy_lr", "exact_kl"},
               "aggregate.full");
    c.aggregate.full.prompt_sample = positive(fu, "prompt_sample", 64);
    c.aggregate.full.gen_per_prompt = positive(fu, "gen_per_prompt", 16);
    c.aggregate.full.iterations = positive(fu, "iterations", 20);
    c.aggregate.full.inner_steps = positive(fu, "inner_steps", 25);
    c.aggregate.full.mwu_eta = get_or<double>(fu, "mwu_eta", 0.01);
    c.aggregate.full.policy_lr = get_or<double>(fu, "policy_lr", 0.0);
    c.aggregate.full.exact_kl = get_or<bool>(fu, "exact_kl", false);
    c.aggregate.full.beta_kl = c.train.beta_kl;
    if (c.aggregate.full.policy_lr < 0.0) throw ConfigError("aggregate.full.policy_lr must be >= 0");

    const Json b = get_or<Json>(j, "baselines", Json::object());
    check_keys(b, {"vanilla", "cluster", "true_label"}, "baselines");
    c.vanilla = get_or<bool>(b, "vanilla", true);
    c.cluster = get_or<bool>(b, "cluster", true);
    c.true_label = get_or<bool>(b, "true_label", true);

    const Json id = get_or<Json>(j, "identify", Json::object());
    check_keys(id, {"n_annotators", "records_per_annotator", "eval_pairs_per_group", "grid_sets"}, "identify");
    c.identify.n_annotators = positive(id, "n_annotators", 1000);
    c.identify.records_per_annotator = positive(id, "records_per_annotator", 1);
    c.identify.eval_pairs_per_group = positive(id, "eval_pairs_per_group", 500);
    c.identify.grid_sets = positive(id, "grid_sets", 10000);

    const Json s = get_or<Json>(j, "sweep", Json::object());
    check_keys(s, {"k_grid"}, "sweep");
    if (!options.k_grid.empty()) c.k_grid = options.k_grid;
    else if (s.contains("k_grid")) c.k_grid = s["k_grid"].get<std::vector<std::size_t>>();
    for (auto k : c.k_grid)
        if (k < 1) throw ConfigError("K grid entries must be >= 1");
    return c;
}

World build_world(const Json& spec, std::uint64_t seed) {
    if (!spec.is_object() || !spec.contains("kind")) throw ConfigError("world.kind is required");
    const auto kind = spec["kind"].get<std::string>();
    World w;
    if (kind == "mpi") {
        check_keys(spec, {"kind", "phrases_per_score", "paraphrases", "eval_paraphrases", "types"}, "world");
        MpiOptions o;
        o.phrases_per_score = positive(spec, "phrases_per_score", o.phrases_per_score);
        o.paraphrases = positive(spec, "paraphrases", o.paraphrases);
        o.eval_paraphrases = get_or<std::size_t>(spec, "eval_paraphrases", o.eval_paraphrases);
        w = gen_mpi_world(o);
    } else if (kind == "opinion") {
        check_keys(spec, {"kind", "questions", "options", "rephrasings", "eval_rephrasings", "groups"}, "world");
        const std::size_t nq = positive(spec, "questions", 5);
        const std::size_t no = positive(spec, "options", 3);
        OpinionOptions o;
        o.rephrasings = positive(spec, "rephrasings", o.rephrasings);
        o.eval_rephrasings = get_or<std::size_t>(spec, "eval_rephrasings", o.eval_rephrasings);
        if (!spec.contains("groups") || !spec["groups"].is_array() || spec["groups"].empty())
            throw ConfigError("opinion world needs a nonempty 'groups' list");
        Rng rng = Rng::substream(seed, "world");
        std::vector<std::vector<Vector>> dists;
        std::vector<std::string> names;
        std::vector<double> mix;
        for (const auto& gj : spec["groups"]) {
            check_keys(gj, {"name", "mixing", "dists"}, "world.groups");
            names.push_back(get_or<std::string>(gj, "name", "G" + std::to_string(names.size())));
            mix.push_back(get_or<double>(gj, "mixing", -1.0));
            std::vector<Vector> per_q;
            if (gj.contains("dists")) {
                for (const auto& dj : gj["dists"]) per_q.push_back(io::vector_from(dj));
            } else {
                for (std::size_t q = 0; q < nq; ++q) {
                    Vector v(static_cast<Eigen::Index>(no));
                    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = std::exp(1.5 * rng.normal());
                    per_q.push_back(v / v.sum());
                }
            }
            dists.push_back(std::move(per_q));
        }
        const Vector mixing = Eigen::Map<const Vector>(mix.data(), static_cast<Eigen::Index>(mix.size()));
        w = gen_opinion_world(nq, no, dists, mixing, names, o);
        return w;
    } else if (kind == "feature") {
        check_keys(spec, {"kind", "n_prompts", "candidates_per_prompt", "d", "eval_prompts", "feature_seed", "types"},
                   "world");
        FeatureWorldOptions o;
        o.n_prompts = positive(spec, "n_prompts", o.n_prompts);
        o.candidates_per_prompt = positive(spec, "candidates_per_prompt", o.candidates_per_prompt);
        o.d = positive(spec, "d", o.d);
        o.eval_prompts = get_or<std::size_t>(spec, "eval_prompts", o.eval_prompts);
        o.feature_seed = get_or<std::uint64_t>(spec, "feature_seed", seed);
        if (!spec.contains("types")) throw ConfigError("feature world needs 'types'");
        return gen_feature_world(o, parse_types(spec["types"], o.d));
    } else if (kind == "file") {
        check_keys(spec, {"kind", "universe", "types", "protocol", "eval_prompts"}, "world");
        if (!spec.contains("universe")) throw ConfigError("file world needs 'universe'");
        const fs::path p = spec["universe"].get<std::string>();
        if (!fs::exists(p)) throw ConfigError("universe file not found: " + p.string());
        auto u = io::universe_from_json(io::read_json(p));
        w.kind = "file";
        w.universe = std::move(u.universe);
        w.sft = std::move(u.sft);
        if (!spec.contains("types")) throw ConfigError("file world needs 'types'");
        w.types = parse_types(spec["types"], w.universe.dim());
        const auto proto = get_or<std::string>(spec, "protocol", "subset_logit");
        if (proto == "subset_logit") w.protocol = ChoiceProtocol::subset_logit;
        else if (proto == "full_set_then_reject") w.protocol = ChoiceProtocol::full_set_then_reject;
        else throw ConfigError("unknown protocol '" + proto + "'");
        std::set<PromptId> eval;
        for (const auto& id : get_or<Json>(spec, "eval_prompts", Json::array())) {
            try {
                eval.insert(w.universe.prompt_index(id.get<std::string>()));
            } catch (const DataError& e) {
                throw ConfigError(e.what());
            }
        }
        for (PromptId x = 0; x < w.universe.num_prompts(); ++x) {
            if (eval.empty() || eval.count(x)) w.eval_prompts.push_back(x);
            if (!eval.count(x)) w.train_prompts.push_back(x);
        }
        if (w.train_prompts.empty()) throw ConfigError("file world has no training prompts");
        return w;
    } else {
        throw ConfigError("unknown world kind '" + kind + "' (expected mpi, opinion, feature or file)");
    }
    if (spec.contains("types")) {
        w.types = parse_types(spec["types"], w.universe.dim());
    }
    return w;
}

std::string sha256_hex(const std::string& bytes) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) != 1 || EVP_DigestFinal_ex(ctx, md.data(), &len) != 1) {
        EVP_MD_CTX_free(ctx);
        throw std::runtime_error("SHA-256 failed");
    }
    EVP_MD_CTX_free(ctx);
    std::string hex;
    char buf[3];
    for (unsigned i = 0; i < len; ++i) {
        std::snprintf(buf, sizeof buf, "%02x", md[i]);
        hex += buf;
    }
    return hex;
}

// ---- commands ---------------------------------------------------------------------

void cmd_generate(const ExperimentConfig& c) {
    ensure_out(c);
    const World w = build_world(c.world, c.seed);
    Rng gen = Rng::substream(c.seed, "generate");
    Rng ev = Rng::substream(c.seed, "eval");
    Rng val = Rng::substream(c.seed, "validation");
    const auto labeled = gen_annotators(w, c.generator, gen);
    const auto eval = gen_eval_pairs(w, c.eval_pairs_per_group, ev);
    const auto validation = gen_eval_pairs(w, c.validation_pairs_per_group, val);

    const std::vector<std::pair<std::string, Json>> files{
        {"universe.json", io::universe_to_json(w.universe, w.sft)},
        {"world.json", io::world_to_json(w)},
        {"dataset.json", io::dataset_to_json(labeled, w.universe)},
        {"eval.json", io::eval_to_json(eval, w.universe)},
        {"validation.json", io::eval_to_json(validation, w.universe)},
    };
    Json hashes = Json::object();
    for (const auto& [name, j] : files) {
        const std::string text = j.dump(2) + "\n";
        write_text(c.out / name, text);
        hashes[name] = sha256_hex(text);
    }
    Json manifest = {{"seed", c.seed},
                     {"world", c.world},
                     {"types", io::types_to_json(w.types)},
                     {"n_annotators", labeled.data.num_annotators()},
                     {"n_records", labeled.data.num_records()},
                     {"items_per_choice", c.generator.items_per_choice},
                     {"files", std::move(hashes)}};
    if (manifest["world"].contains("universe")) manifest["world"].erase("universe");
    io::write_json(c.out / "manifest.json", manifest);
}

void cmd_em(const ExperimentConfig& c) {
    const auto a = load_artifacts(c.out);
    const MixtureState s = run_em(a.dataset.data, a.world.sft, a.world.universe, c.em);
    io::write_json(c.out / "mixture.json", io::mixture_to_json(s));
    const double drop = max_loglik_drop(s.loglik_trace);
    if (drop > 1e-9) {
        std::ostringstream os;
        os << "EM log-likelihood decreased by " << drop;
        throw InvariantViolation(os.str());
    }
}

void cmd_vanilla(const ExperimentConfig& c) {
    const auto a = load_artifacts(c.out);
    const auto res = train_weighted_dpo(LinearPolicy::zero(a.world.universe.dim()), a.world.sft, a.world.universe,
                                        WeightedDataset::unit(a.dataset.data.records()), c.train);
    Json j = io::policy_to_json(res.policy);
    j["converged"] = res.converged;
    j["iterations"] = res.iterations;
    j["loss"] = res.loss;
    io::write_json(c.out / "vanilla.json", j);
}

void cmd_cluster(const ExperimentConfig& c) {
    const auto a = load_artifacts(c.out);
    Rng rng = Rng::substream(c.seed, "cluster");
    const auto res = cluster_dpo_baseline(a.dataset.data, a.world.universe, a.world.sft, c.em.K, c.train, rng);
    Json labels = Json::object();
    for (AnnotatorId i = 0; i < a.dataset.data.num_annotators(); ++i)
        labels[a.dataset.data.annotator_names()[i]] = res.labels[i];
    Json pols = Json::array();
    for (const auto& p : res.policies) pols.push_back(io::policy_to_json(p));
    io::write_json(c.out / "cluster.json", {{"K", c.em.K}, {"policies", std::move(pols)}, {"labels", std::move(labels)}});
}

void cmd_true_label(const ExperimentConfig& c) {
    const auto a = load_artifacts(c.out);
    if (a.dataset.true_labels.empty()) throw DataError("dataset carries no true labels");
    const auto pols = true_label_dpo(a.dataset, a.world.sft, a.world.universe, c.train);
    Json pj = Json::array();
    for (const auto& p : pols) pj.push_back(io::policy_to_json(p));
    io::write_json(c.out / "true_label.json", {{"types", a.dataset.type_names}, {"policies", std::move(pj)}});
}

void cmd_aggregate(const ExperimentConfig& c) {
    const auto a = load_artifacts(c.out);
    const MixtureState s = io::mixture_from_json(io::read_json(need(c.out / "mixture.json")));
    check_policy_dims(s.policies, a.world.universe);
    const auto& u = a.world.universe;
    const auto& sft = a.world.sft;
    const std::string m = c.aggregate.method;
    const KlTemperature beta = c.train.beta_kl;

    io::AggregationReport rep;
    rep.method = m;
    rep.regret_matrix = regret_matrix(discrepancy_matrix(s.policies, sft, u));
    Json policy;
    const auto K = static_cast<Eigen::Index>(s.K());
    if (K == 1) {
        rep.w = Vector::Ones(1);
        rep.regret_signed = Vector::Zero(1);
        policy = io::policy_to_json(s.policies[0]);
        if (m == "mmra_ae") rep.duality_gap = 0.0;
    } else if (m == "uniform") {
        const auto e = uniform_baseline(s.policies);
        rep.w = e.weights;
        rep.regret_signed = subgroup_regrets(e, s.policies, sft, u, beta);
        policy = io::ensemble_to_json(e);
    } else if (m == "mmra_ae") {
        const auto r = mmra_ae(s.policies, sft, u, c.aggregate.hedge_iterations, c.aggregate.hedge_step);
        rep.w = r.policy.weights;
        rep.regret_signed = subgroup_regrets(r.policy, s.policies, sft, u, beta);
        rep.duality_gap = r.hedge.gap;
        rep.gap_bound = hedge_gap_bound(s.K(), c.aggregate.hedge_iterations, r.regret.cwiseAbs().maxCoeff());
        for (const auto& t : r.hedge.trace) rep.trace.push_back({t.t, t.w, t.max_regret});
        policy = io::ensemble_to_json(r.policy);
    } else if (m == "mmra_lw") {
        if (s.gamma.rows() != static_cast<Eigen::Index>(a.dataset.data.num_annotators()))
            throw DataError("mixture gamma does not match the dataset");
        const auto r = mmra_lw(s.policies, s.gamma, a.dataset.data, sft, u, c.aggregate.lw);
        rep.w = r.w;
        rep.regret_signed = r.regrets;
        rep.trace = r.trace;
        policy = io::policy_to_json(r.policy);
    } else {
        Rng rng = Rng::substream(c.seed, "aggregate");
        const auto r = mmra_full(s.policies, sft, u, c.aggregate.full, rng);
        rep.w = r.w;
        rep.regret_signed = r.regrets;
        rep.trace = r.trace;
        policy = io::policy_to_json(r.policy);
    }
    io::write_json(c.out / ("aggregate_" + m + ".json"), io::report_to_json(rep));
    io::write_json(c.out / ("policy_" + m + ".json"), policy);
}

namespace {

template <class P>
MetricRow metric_row(const std::string& method, const std::string& group, const P& pi, const World& w,
                     const std::vector<PreferenceRecord>& pairs, const LinearPolicy& reference, KlTemperature beta) {
    const double reg = subgroup_regret(pi, reference, w.sft, w.universe, beta);
    return {method, group, mean_margin(pi, w.sft, w.universe, pairs, beta), accuracy(pi, w.sft, w.universe, pairs, beta),
            reg, std::max(0.0, reg)};
}

// Regret table: one row per method, one column per group, then the row maximum.
std::string regret_table(const std::vector<MetricRow>& rows, const std::vector<std::string>& groups) {
    std::ostringstream os;
    os << "method";
    for (const auto& g : groups) os << '\t' << g;
    os << "\tMax\n";
    for (std::size_t i = 0; i < rows.size(); i += groups.size()) {
        os << rows[i].method;
        double mx = 0.0;
        for (std::size_t g = 0; g < groups.size(); ++g) {
            os << '\t' << tsv_number(rows[i + g].regret_clamped);
            mx = std::max(mx, rows[i + g].regret_clamped);
        }
        os << '\t' << tsv_number(mx) << '\n';
    }
    return os.str();
}

}  // namespace

void cmd_eval(const ExperimentConfig& c) {
    const World w = load_world(c.out);
    const EvalPairSet eval = io::eval_from_json(io::read_json(need(c.out / "eval.json")), w.universe);
    const KlTemperature beta = c.train.beta_kl;
    if (eval.group_names != w.types.names) throw DataError("evaluation groups do not match the world's types");
    const std::size_t G = eval.groups.size();

    std::vector<LinearPolicy> exact;
    for (const auto& b : w.types.betas) exact.push_back(optimal_policy(b.beta, beta));
    // Learned reference: the EM-DPO component with the best margin on each group.
    std::vector<LinearPolicy> learned = exact;
    std::optional<std::vector<LinearPolicy>> em;
    if (fs::exists(c.out / "mixture.json")) {
        em = io::mixture_from_json(io::read_json(c.out / "mixture.json")).policies;
        check_policy_dims(*em, w.universe);
        for (std::size_t g = 0; g < G; ++g)
            learned[g] = (*em)[max_mean_margin(*em, w.sft, w.universe, eval.groups[g], beta).index];
    }

    std::vector<MetricRow> rows, rows_exact;
    auto add = [&](const std::string& method, auto&& policy_for_group, const std::vector<double>& margins) {
        for (std::size_t g = 0; g < G; ++g) {
            const auto& pi = policy_for_group(g);
            rows.push_back(metric_row(method, eval.group_names[g], pi, w, eval.groups[g], learned[g], beta));
            rows_exact.push_back(metric_row(method, eval.group_names[g], pi, w, eval.groups[g], exact[g], beta));
            if (!margins.empty()) rows.back().mean_margin = rows_exact.back().mean_margin = margins[g];
        }
    };
    auto add_single = [&](const std::string& method, const auto& pi) {
        add(method, [&](std::size_t) -> const auto& { return pi; }, {});
    };
    auto add_ensemble = [&](const std::string& method, const std::vector<LinearPolicy>& pols) {
        check_policy_dims(pols, w.universe);
        std::vector<std::size_t> pick;
        std::vector<double> margins;
        for (std::size_t g = 0; g < G; ++g) {
            const auto best = max_mean_margin(pols, w.sft, w.universe, eval.groups[g], beta);
            pick.push_back(best.index);
            margins.push_back(best.value);
        }
        add(method, [&](std::size_t g) -> const LinearPolicy& { return pols[pick[g]]; }, margins);
    };

    add_single("sft", LinearPolicy::zero(w.universe.dim()));
    if (fs::exists(c.out / "vanilla.json")) {
        const auto p = io::policy_from_json(io::read_json(c.out / "vanilla.json"));
        check_dim(p, w.universe);
        add_single("vanilla", p);
    }
    if (fs::exists(c.out / "cluster.json")) add_ensemble("cluster", policies_from(io::read_json(c.out / "cluster.json")));
    if (fs::exists(c.out / "true_label.json"))
        add_ensemble("true_label", policies_from(io::read_json(c.out / "true_label.json")));
    if (em) add_ensemble("em_dpo", *em);
    for (const char* m : kMethods) {
        const fs::path p = c.out / (std::string("policy_") + m + ".json");
        if (!fs::exists(p)) continue;
        const Json j = io::read_json(p);
        if (j.contains("weights")) {
            const auto e = io::ensemble_from_json(j);
            check_policy_dims(e.components, w.universe);
            add_single(m, e);
        } else {
            const auto pi = io::policy_from_json(j);
            check_dim(pi, w.universe);
            add_single(m, pi);
        }
    }

    std::ostringstream metrics;
    write_metric_rows(metrics, rows);
    write_text(c.out / "metrics.tsv", metrics.str());
    write_text(c.out / "regret.tsv", regret_table(rows, eval.group_names));
    write_text(c.out / "regret_exact.tsv", regret_table(rows_exact, eval.group_names));
}

void cmd_identify(const ExperimentConfig& c) {
    ensure_out(c);
    const World w = build_world(c.world, c.seed);
    Json out = Json::object();
    for (std::size_t items : {2u, 3u}) {
        IdentifyOptions o = c.identify;
        o.items = items;
        const auto rep = identifiability_experiment(w, o, c.seed, c.em);
        out[rep.mode] = io::identify_to_json(rep);
    }
    io::write_json(c.out / "identify.json", out);
}

void cmd_sweep_k(const ExperimentConfig& c) {
    const auto a = load_artifacts(c.out);
    const auto val = io::eval_from_json(io::read_json(need(c.out / "validation.json")), a.world.universe);
    const auto rows = select_k(a.dataset.data, val, a.world.sft, a.world.universe, c.k_grid, c.em);
    std::ostringstream os;
    os << "K\tgroup\tmax_mean_margin\taccuracy\tloglik\n";
    for (const auto& r : rows)
        os << r.K << '\t' << r.group << '\t' << tsv_number(r.max_mean_margin) << '\t' << tsv_number(r.accuracy) << '\t'
           << tsv_number(r.loglik) << '\n';
    write_text(c.out / "sweep_k.tsv", os.str());
}

// ---- entry point ----------------------------------------------------------------

int run(int argc, const char* const* argv) {
    CLI::App app{"Heterogeneous-preference alignment experiments: EM-DPO, min-max regret aggregation, identifiability checks"};
    app.require_subcommand(1, 1);
    Options opt;
    std::string config, out, method;
    std::uint64_t seed = 0;

    using Command = void (*)(const ExperimentConfig&);
    const std::vector<std::tuple<const char*, const char*, Command>> commands{
        {"generate", "simulate a world, annotator dataset and evaluation pairs", cmd_generate},
        {"em", "fit the EM-DPO mixture", cmd_em},
        {"vanilla", "fit a single DPO policy on pooled data", cmd_vanilla},
        {"cluster", "k-means on annotator features, then DPO per cluster", cmd_cluster},
        {"true-label", "DPO per true latent type", cmd_true_label},
        {"aggregate", "combine the EM-DPO ensemble into one policy", cmd_aggregate},
        {"eval", "write metric tables for every available policy", cmd_eval},
        {"identify", "binary vs ternary identifiability experiment", cmd_identify},
        {"sweep-k", "EM-DPO validation metrics over a grid of K", cmd_sweep_k},
    };
    std::map<const CLI::App*, Command> dispatch;
    for (const auto& [name, help, fn] : commands) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->add_option("--config", config, "experiment config (JSON)")->check(CLI::ExistingFile);
        sub->add_option("--seed", seed, "root seed (overrides the config)");
        sub->add_option("--out", out, "output directory (overrides the config)");
        sub->add_option("--method", method, "aggregation method: uniform, mmra_ae, mmra_lw, mmra_full");
        sub->add_option("--k-grid", opt.k_grid, "comma-separated K values for sweep-k")->delimiter(',');
        dispatch[sub] = fn;
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? ExitCode::ok : ExitCode::config_error;
    }

    try {
        for (auto* sub : app.get_subcommands()) {
            if (!config.empty()) opt.config = config;
            if (sub->count("--seed")) opt.seed = seed;
            if (!out.empty()) opt.out = out;
            if (!method.empty()) opt.method = method;
            dispatch.at(sub)(load_config(opt));
        }
        return ExitCode::ok;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return ExitCode::config_error;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return ExitCode::data_error;
    } catch (const InvariantViolation& e) {
        std::cerr << "invariant violation: " << e.what() << '\n';
        return ExitCode::invariant_error;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return ExitCode::data_error;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return ExitCode::other_error;
    }
}

}  // namespace hetpref::cli
