#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "dense_oracles.hpp"
#include "mvmrf/cli_io.hpp"

using namespace mvmrf;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("mvmrf_test_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

json tiny_config_json() {
  return json::parse(R"({
    "lattice": {"nx": 3, "ny": 2},
    "variables": ["t", "p"],
    "dataset": "data.csv",
    "output_dir": "out",
    "sampler": {"n_chains": 2, "regime1_iters": 40, "regime2_iters": 40, "regime3_iters": 100,
                "adapt_interval": 20, "thin": 5, "seed": 3, "threads": 1},
    "simulation": {"members": 2,
                   "dependence": {"rho_12": -0.2, "phi_11": 0.15, "phi_12": 0.1, "phi_21": 0.05, "phi_22": 0.15}}
  })");
}

int run_cli(std::vector<std::string> args, std::string* out_text = nullptr, std::string* err_text = nullptr) {
  args.insert(args.begin(), "mvmrf");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
  if (out_text) *out_text = out.str();
  if (err_text) *err_text = err.str();
  return code;
}

PosteriorArchive small_archive() {
  PosteriorArchive a;
  a.dims = {3, 2, 2, 2, 3, 1};
  a.n_chains = 2;
  a.samples_per_chain = 4;
  a.seed = 9;
  a.samples.names = {"dependence", "field"};
  std::mt19937_64 rng(1);
  std::normal_distribution<double> z;
  MatrixXd dep(8, 5), field(8, 12);
  for (Index k = 0; k < dep.size(); ++k) dep.data()[k] = z(rng);
  for (Index k = 0; k < field.size(); ++k) field.data()[k] = z(rng);
  a.samples.blocks = {dep, field};
  a.acceptance = {{{3, {"joint", "tau2_1"}, {0.21, 0.3}}}, {{3, {"joint", "tau2_1"}, {0.19, 0.25}}}};
  a.psrf = {{"rho_12", 1.01}, {"h_bar_3", std::nullopt}};
  a.config_json = R"({"a":1,"b":[1.5,2]})";
  return a;
}

}  // namespace

TEST(Utilities, FnvReferenceVectors) {
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(fnv1a64("foobar"), 0x85944171f73967e8ULL);
  EXPECT_EQ(hex64(0xabcULL), "0000000000000abc");
}

TEST(Utilities, DoubleTextRoundTrip) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::uint64_t> bits;
  for (int t = 0; t < 10000; ++t) {
    const double v = std::bit_cast<double>(bits(rng));
    if (!std::isfinite(v)) continue;
    EXPECT_EQ(std::bit_cast<std::uint64_t>(*parse_double(format_double(v))), std::bit_cast<std::uint64_t>(v));
  }
  EXPECT_EQ(format_double(std::nan("")), "NA");
  EXPECT_FALSE(parse_double("1.5x").has_value());
  EXPECT_FALSE(parse_double("").has_value());
}

TEST(Config, DefaultsAndPaths) {
  const auto c = parse_run_config(tiny_config_json(), "/base");
  EXPECT_EQ(c.p(), 2);
  EXPECT_EQ(c.dataset_path(), fs::path("/base/data.csv"));
  EXPECT_EQ(c.prior.sigma2_alpha, 10.0);
  EXPECT_EQ(c.prior.dep_box.upper, VectorXd::Constant(5, 0.3));
  EXPECT_EQ(c.sampler.target_acceptance, 0.2);
  EXPECT_EQ(c.sampler.joint_block, JointBlock::Cross);
  ASSERT_TRUE(c.simulation.has_value());
  EXPECT_EQ(c.simulation->dep.phi(0, 1), 0.1);
  EXPECT_EQ(c.simulation->dep.rho(0, 1), -0.2);
  EXPECT_EQ(c.analysis.probabilities.size(), 3u);
}

TEST(Config, EffectiveDumpIsAFixedPoint) {
  const auto c = parse_run_config(tiny_config_json(), "/base");
  const json e = effective_config_json(c);
  const auto c2 = parse_run_config(e, "/base");
  EXPECT_EQ(effective_config_json(c2).dump(), e.dump());
  auto j = tiny_config_json();
  j["sampler"]["seed"] = 4;
  EXPECT_NE(effective_config_json(parse_run_config(j, "/base")).dump(), e.dump());
}

TEST(Config, ErrorsNameTheField) {
  auto expect_error = [](json j, const std::string& fragment) {
    try {
      parse_run_config(j, "/");
      FAIL() << "no error for " << fragment;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
    }
  };
  auto j = tiny_config_json();
  j["lattice"].erase("nx");
  expect_error(j, "lattice.nx");
  j = tiny_config_json();
  j["simulation"]["dependence"]["phi_31"] = 0.1;
  expect_error(j, "phi_31");
  j = tiny_config_json();
  j["sampler"]["target_acceptance"] = 1.5;
  expect_error(j, "target acceptance");
  j = tiny_config_json();
  j["prior"] = {{"dep_box", {{"lower", {0, 0}}, {"upper", {1, 1, 1, 1, 1}}}}};
  expect_error(j, "prior.dep_box.lower");
  j = tiny_config_json();
  j["analysis"] = {{"contours", {{"boxes", {99}}}}};
  expect_error(j, "box 99");
}

TEST(Dataset, SmallFileParses) {
  const std::string text =
      "location,grid_x,grid_y,latitude,longitude,elevation,run0_var0\n"
      "0,0,0,40,-100,10,1.5\n"
      "1,1,0,40,-99,20,2.5\n"
      "2,0,1,41,-100,30,3.5\n"
      "3,1,1,41,-99,40,4.5\n";
  const auto d = parse_ensemble(text, 2, 2, 1, Adjacency::Rook1);
  EXPECT_EQ(d.n(), 4);
  EXPECT_EQ(d.m(), 1);
  EXPECT_EQ(d.y(0), (VectorXd(4) << 1.5, 2.5, 3.5, 4.5).finished());
  // rows may come in any order
  const std::string shuffled =
      "location,grid_x,grid_y,latitude,longitude,elevation,run0_var0\n"
      "2,0,1,41,-100,30,3.5\n"
      "0,0,0,40,-100,10,1.5\n"
      "3,1,1,41,-99,40,4.5\n"
      "1,1,0,40,-99,20,2.5\n";
  EXPECT_EQ(parse_ensemble(shuffled, 2, 2, 1, Adjacency::Rook1).y(0), d.y(0));
}

TEST(Dataset, ErrorsNameRowAndField) {
  const std::string head = "location,grid_x,grid_y,latitude,longitude,elevation,run0_var0\n";
  auto expect_error = [&](const std::string& body, const std::string& fragment) {
    try {
      parse_ensemble(head + body, 2, 2, 1, Adjacency::Rook1, "f.csv");
      FAIL() << "no error for " << fragment;
    } catch (const DataError& e) {
      EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
    }
  };
  expect_error("0,0,0,40,-100,10,1\n1,1,0,40,-99,20,NaN\n2,0,1,41,-100,30,3\n3,1,1,41,-99,40,4\n", "grid box 1");
  expect_error("0,0,0,40,-100,10,1\n1,1,0,40,-99,20,nan\n2,0,1,41,-100,30,3\n3,1,1,41,-99,40,4\n", "run0_var0");
  expect_error("0,0,0,40,-100,10,1\n1,1,0,40,-99,20,2\n2,0,1,41,-100,30,3\n", "expected 4 grid boxes");
  expect_error("0,0,0,40,-100,10,1\n1,1,0,40,-99,20,2\n1,1,0,41,-100,30,3\n3,1,1,41,-99,40,4\n", "appears twice");
  expect_error("0,0,0,40,-100,10,1\n1,1,0,40,-99,20,2\n2,1,1,41,-100,30,3\n3,1,1,41,-99,40,4\n", "line 4");
  expect_error("0,0,0,40,-100,10,1\n1,1,0,40,-99,20\n2,0,1,41,-100,30,3\n3,1,1,41,-99,40,4\n", "line 3");
  EXPECT_THROW(parse_ensemble("location,x\n", 2, 2, 1, Adjacency::Rook1), DataError);
}

TEST(Simulation, RoundTripsBitwiseThroughFiles) {
  TempDir tmp("sim_rt");
  const auto c = parse_run_config(tiny_config_json(), tmp.path);
  const auto [data, truth] = simulate_dataset(*c.simulation, c.lattice(), 5);
  save_ensemble(c.dataset_path(), data);
  EXPECT_FALSE(fs::exists(tmp.path / "data.csv.tmp"));
  const auto back = load_ensemble(c.dataset_path(), c);
  for (Index r = 0; r < data.m(); ++r) EXPECT_EQ(back.y(r), data.y(r));
  EXPECT_EQ(back.x1(), data.x1());
  EXPECT_EQ(dataset_csv(back), dataset_csv(data));
}

TEST(Simulation, SeededAndNoiselessLimit) {
  auto c = parse_run_config(tiny_config_json(), "/");
  const auto a = simulate_dataset(*c.simulation, c.lattice(), 8);
  const auto b = simulate_dataset(*c.simulation, c.lattice(), 8);
  EXPECT_EQ(dataset_csv(a.first), dataset_csv(b.first));
  auto spec = *c.simulation;
  spec.sigma2.setZero();
  spec.spatial = false;
  spec.dep = DependenceParams::zeros(2);
  const auto [d, truth] = simulate_dataset(spec, c.lattice(), 9);
  ModelState s = ModelState::initial(d);
  s.alpha = spec.alpha;
  s.beta = truth.beta;
  for (Index r = 0; r < d.m(); ++r) EXPECT_EQ(d.y(r), regression_mean(d, s, r));
}

TEST(Simulation, RejectsNonPositiveDefiniteTruth) {
  auto c = parse_run_config(tiny_config_json(), "/");
  auto spec = *c.simulation;
  spec.dep.phi << 0.9, 0.9, 0.9, 0.9;
  EXPECT_THROW(simulate_dataset(spec, c.lattice(), 1), std::invalid_argument);
}

// y_r = h_r + e_r with h_r ~ N(0, Q^-1): the pooled sum of squares of each
// variable has mean tr(C_j) and variance 2 m tr(C_j^2), C = Q^-1 + diag(s2).
TEST(Simulation, MomentsMatchDenseCovariance) {
  StackedLattice lat(build_grid_lattice(10, 10), 2);
  SimulationSpec spec = default_simulation(2);
  spec.members = 50;
  spec.dep.set_rho(0, 1, -0.2);
  spec.dep.phi << 0.15, 0.10, 0.05, 0.15;
  spec.alpha.setZero();
  spec.beta_bar.setZero();
  spec.sigma2_b = 0.0;
  spec.h_bar_sd = 0.0;
  const auto [data, truth] = simulate_dataset(spec, lat, 21);
  const MatrixXd q = oracle::stacked_precision(lat.grid(), spec.dep.rho, spec.dep.phi, spec.dep.tau2);
  MatrixXd cov = q.inverse();
  for (Index a = 0; a < cov.rows(); ++a) cov(a, a) += spec.sigma2[a % 2];
  for (Index j = 0; j < 2; ++j) {
    std::vector<Index> idx;
    for (Index i = 0; i < lat.n(); ++i) idx.push_back(i * 2 + j);
    MatrixXd cj(idx.size(), idx.size());
    for (std::size_t a = 0; a < idx.size(); ++a)
      for (std::size_t b = 0; b < idx.size(); ++b) cj(static_cast<Index>(a), static_cast<Index>(b)) = cov(idx[a], idx[b]);
    double ss = 0.0;
    for (Index r = 0; r < data.m(); ++r) ss += data.slice(r, j).squaredNorm();
    const double mean = 50.0 * cj.trace();
    const double sd = std::sqrt(2.0 * 50.0 * (cj * cj).trace());
    EXPECT_LT(std::abs(ss - mean), 4.0 * sd) << "variable " << j;
  }
}

TEST(Archive, ByteIdenticalRoundTrip) {
  const auto a = small_archive();
  const std::string bytes = serialize_archive(a);
  const auto b = deserialize_archive(bytes);
  EXPECT_EQ(serialize_archive(b), bytes);
  EXPECT_EQ(b.samples.get("field"), a.samples.get("field"));
  EXPECT_EQ(b.psrf.size(), 2u);
  EXPECT_FALSE(b.psrf[1].psrf.has_value());
  EXPECT_EQ(b.dims, a.dims);
  EXPECT_EQ(bytes.substr(0, 8), "MVMRFARC");
  EXPECT_EQ(bytes[8], 1);
}

TEST(Archive, HeaderCarriesConfigHash) {
  const auto a = small_archive();
  const std::string bytes = serialize_archive(a);
  std::uint64_t hlen = 0;
  for (int k = 0; k < 8; ++k) hlen |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[9 + k])) << (8 * k);
  const json h = json::parse(bytes.substr(17, hlen));
  EXPECT_EQ(h["config_hash"].get<std::string>(), hex64(fnv1a64(h["config"].dump())));
  EXPECT_EQ(h["dims"]["nx"], 3);
}

TEST(Archive, CorruptionDetected) {
  const std::string bytes = serialize_archive(small_archive());
  std::string flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x01;
  EXPECT_THROW(deserialize_archive(flipped), DataError);
  std::string version = bytes;
  version[8] = 2;
  EXPECT_THROW(deserialize_archive(version), DataError);
  EXPECT_THROW(deserialize_archive(bytes.substr(0, bytes.size() - 9)), DataError);
  EXPECT_THROW(deserialize_archive("not an archive at all, really not"), DataError);
}

TEST(Archive, FileWriteIsAtomic) {
  TempDir tmp("arc");
  const auto a = small_archive();
  write_archive(tmp.path / "x.mvarc", a);
  EXPECT_FALSE(fs::exists(tmp.path / "x.mvarc.tmp"));
  EXPECT_EQ(serialize_archive(read_archive(tmp.path / "x.mvarc")), serialize_archive(a));
}

TEST(Summaries, ConstantArchiveGivesZeroOneField) {
  auto a = small_archive();
  MatrixXd field(8, 12);
  for (Index c = 0; c < 12; ++c) field.col(c).setConstant(static_cast<double>(c));
  a.samples.blocks[1] = field;
  AnalysisConfig none;
  std::ostringstream warn;
  const auto files = summarize_archive(a, none, {parse_probability_flag("above:median")}, warn);
  const std::string& f = files.at("prob_var0_above_median.csv");
  // variable 0 sits in columns 0,2,...,10; median 5 -> boxes 3,4,5 above
  EXPECT_EQ(f, "location,grid_x,grid_y,probability\n0,0,0,0\n1,1,0,0\n2,2,0,0\n3,0,1,1\n4,1,1,1\n5,2,1,1\n");
  EXPECT_THROW(parse_probability_flag("sideways:1"), ConfigError);
  EXPECT_THROW(parse_probability_flag("above"), ConfigError);
}

TEST(Summaries, DegenerateBoxesExcludedFromClustering) {
  auto a = small_archive();
  a.samples.blocks[1].col(0).setConstant(1.0);
  a.samples.blocks[1].col(1).setConstant(2.0);
  AnalysisConfig cfg;
  cfg.clusters = ClusterRequest{2, Linkage::Average};
  std::ostringstream warn;
  const auto files = summarize_archive(a, cfg, {}, warn);
  EXPECT_NE(warn.str().find("1 grid boxes"), std::string::npos);
  EXPECT_NE(files.at("clusters.csv").find("\n0,0,0,-1\n"), std::string::npos);
}

TEST(Cli, ExitCodes) {
  TempDir tmp("cli_codes");
  std::string out, err;
  EXPECT_EQ(run_cli({"validate", "--config", (tmp.path / "missing.json").string()}, &out, &err), kExitConfig);
  EXPECT_EQ(run_cli({"frobnicate"}, &out, &err), kExitConfig);
  EXPECT_EQ(run_cli({"--help"}, &out, &err), kExitOk);
  write_text(tmp.path / "bad.json", "{ not json");
  EXPECT_EQ(run_cli({"validate", "--config", (tmp.path / "bad.json").string()}, &out, &err), kExitConfig);
  // dataset with a NaN
  write_text(tmp.path / "c.json", tiny_config_json().dump());
  ASSERT_EQ(run_cli({"simulate", "--config", (tmp.path / "c.json").string()}, &out, &err), kExitOk) << err;
  std::string text;
  {
    std::ifstream in(tmp.path / "data.csv");
    std::stringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  }
  const auto pos = text.rfind(',');
  write_text(tmp.path / "data.csv", text.substr(0, pos + 1) + "nan\n");
  EXPECT_EQ(run_cli({"validate", "--config", (tmp.path / "c.json").string()}, &out, &err), kExitData);
  EXPECT_NE(err.find("grid box 5"), std::string::npos) << err;
}

TEST(Cli, SampleDiagnoseSummarize) {
  TempDir tmp("cli_flow");
  const std::string cfg = (tmp.path / "c.json").string();
  write_text(cfg, tiny_config_json().dump());
  std::string out, err;
  ASSERT_EQ(run_cli({"simulate", "--config", cfg}, &out, &err), kExitOk) << err;
  EXPECT_TRUE(fs::exists(tmp.path / "data.truth.json"));
  ASSERT_EQ(run_cli({"validate", "--config", cfg}, &out, &err), kExitOk) << err;
  EXPECT_NE(out.find("lattice 3 x 2"), std::string::npos);
  const int sampled = run_cli({"sample", "--config", cfg}, &out, &err);
  ASSERT_TRUE(sampled == kExitOk || sampled == kExitConvergence) << err;
  const int diag = run_cli({"diagnose", "--config", cfg}, &out, &err);
  EXPECT_EQ(diag, sampled);
  for (const char* row : {"rho_12", "phi_21", "sigma2_2", "h_bar_"}) EXPECT_NE(out.find(row), std::string::npos) << row;
  ASSERT_EQ(run_cli({"summarize", "--config", cfg, "--prob", "below:0"}, &out, &err), kExitOk) << err;
  EXPECT_TRUE(fs::exists(tmp.path / "out" / "summary" / "prob_var1_below_0.csv"));
  EXPECT_TRUE(fs::exists(tmp.path / "out" / "summary" / "clusters.csv"));
  EXPECT_TRUE(fs::exists(tmp.path / "out" / "summary" / "contours.csv"));
  // overrides land in the effective config and therefore the hash
  ASSERT_NE(run_cli({"sample", "--config", cfg, "--seed", "99", "--chains", "3", "--out", (tmp.path / "o2").string()},
                    &out, &err),
            kExitInternal)
      << err;
  const auto a = read_archive(tmp.path / "o2" / "posterior.mvarc");
  EXPECT_EQ(a.n_chains, 3);
  EXPECT_EQ(a.seed, 99u);
  EXPECT_EQ(json::parse(a.config_json)["sampler"]["seed"], 99);
}
