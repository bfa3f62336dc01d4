#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "shrinklm/config.hpp"

using namespace shrinklm;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> violations_of(const std::string& text) {
  try {
    parse_run_config(text);
  } catch (const ConfigError& e) {
    return e.violations();
  }
  return {};
}

bool mentions(const std::vector<std::string>& v, const std::string& needle) {
  for (const auto& s : v)
    if (s.find(needle) != std::string::npos) return true;
  return false;
}

}  // namespace

TEST(Config, DefaultsNeedOnlyTokens) {
  const auto c = parse_run_config("[train]\ntotal_tokens = 4096\n");
  EXPECT_EQ(c.train.total_tokens, 4096u);
  EXPECT_EQ(c.train.stream.seq_len, c.model.context_len);
  EXPECT_DOUBLE_EQ(c.distill.lr_scale, 0.1);
  EXPECT_DOUBLE_EQ(c.kd.temperature, 2.0);
  EXPECT_DOUBLE_EQ(c.kd.alpha, 0.5);
  EXPECT_FALSE(c.distill.pre_drop_tokens.has_value());
}

TEST(Config, ReadsEverySection) {
  const auto c = parse_run_config(
      "# comment\n[model]\nd_model = 64\nn_heads = 4\nn_layers = 6\ncontext_len = 128\n"
      "[data]\nbatch_size = 3\nseq_len = 100\nshuffle = false\n"
      "[optim]\npeak_lr = 3e-4\nwarmup_tokens = 2e3\n"
      "[train]\ntotal_tokens = 20e6\n"
      "[distill]\nlayout = output\nk_remove = 2\ndrop_gap_tokens = 500\npre_drop_tokens = 100\n"
      "[kd]\ntemperature = 1.5\nalpha = 0.25\n");
  EXPECT_EQ(c.model.d_model, 64u);
  EXPECT_EQ(c.model.n_layers, 6u);
  EXPECT_EQ(c.train.stream.batch_size, 3u);
  EXPECT_EQ(c.train.stream.seq_len, 100u);
  EXPECT_FALSE(c.train.stream.shuffle);
  EXPECT_DOUBLE_EQ(c.train.peak_lr, 3e-4);
  EXPECT_EQ(c.train.warmup_tokens, 2000u);
  EXPECT_EQ(c.train.total_tokens, 20'000'000u);
  EXPECT_EQ(c.distill.layout, Layout::Output);
  EXPECT_EQ(c.distill.k_remove, 2u);
  EXPECT_EQ(c.distill.drop_gap_tokens, 500u);
  EXPECT_EQ(c.distill.pre_drop_tokens, 100u);
  EXPECT_DOUBLE_EQ(c.kd.temperature, 1.5);
  EXPECT_DOUBLE_EQ(c.kd.alpha, 0.25);
}

TEST(Config, CollectsAllProblemsAtOnce) {
  const auto v = violations_of(
      "[model]\nd_model = 30\nn_heads = 4\nbogus = 1\n"
      "[nonsense]\nx = 1\n"
      "[data]\nbatch_size = many\n"
      "[distill]\nlayout = sideways\n"
      "[kd]\nalpha = 2\n");
  EXPECT_GE(v.size(), 6u);
  EXPECT_TRUE(mentions(v, "bogus"));
  EXPECT_TRUE(mentions(v, "nonsense"));
  EXPECT_TRUE(mentions(v, "batch_size"));
  EXPECT_TRUE(mentions(v, "sideways"));
  EXPECT_TRUE(mentions(v, "alpha"));
  EXPECT_TRUE(mentions(v, "total_tokens"));
}

TEST(Config, DuplicateKeysAndBadLinesAreErrors) {
  EXPECT_TRUE(mentions(violations_of("[train]\ntotal_tokens = 1e6\ntotal_tokens = 2\n"), "total_tokens"));
  EXPECT_FALSE(violations_of("[train]\ntotal_tokens = 1e6\njust some words\n").empty());
}

TEST(Config, CrossFieldConstraints) {
  EXPECT_TRUE(mentions(violations_of("[model]\ncontext_len = 64\n[data]\nseq_len = 65\n[train]\ntotal_tokens = 1e6\n"),
                       "seq_len"));
  EXPECT_TRUE(mentions(violations_of("[model]\nvocab_size = 100\n[train]\ntotal_tokens = 1e6\n"), "vocab_size"));
  EXPECT_TRUE(mentions(violations_of("[kd]\ntemperature = 0\n[train]\ntotal_tokens = 1e6\n"), "temperature"));
  EXPECT_TRUE(mentions(violations_of("[distill]\nlr_scale = 0\n[train]\ntotal_tokens = 1e6\n"), "lr_scale"));
}

TEST(Config, CanonicalTextRoundTrips) {
  const auto c = parse_run_config(
      "[model]\nd_model = 64\nn_heads = 2\nn_layers = 3\n[train]\ntotal_tokens = 5000\n"
      "[distill]\nlayout = middle\nk_remove = 1\npre_drop_tokens = 0\n[kd]\nalpha = 0.75\n",
      "<t>", "/data");
  const auto again = parse_run_config(c.str(), "<t2>", "/elsewhere");
  EXPECT_EQ(c.str(), again.str());
  EXPECT_EQ(c.flat().entries(), again.flat().entries());
  EXPECT_EQ(c.flat().get("model.d_model"), "64");
  EXPECT_EQ(c.flat().get("distill.layout"), "middle");
}

TEST(Config, RelativePathsFollowConfigDirThenEnv) {
  const std::string text = "[data]\ntrain = corpus/t.txt\n[train]\ntotal_tokens = 1e6\n";
  ::unsetenv(kCorpusRootEnv);
  EXPECT_EQ(parse_run_config(text, "<t>", "/cfg/dir").train_corpus, fs::path("/cfg/dir/corpus/t.txt"));
  ::setenv(kCorpusRootEnv, "/mnt/root", 1);
  EXPECT_EQ(parse_run_config(text, "<t>", "/cfg/dir").train_corpus, fs::path("/mnt/root/corpus/t.txt"));
  EXPECT_EQ(parse_run_config("[data]\ntrain = /abs/t.txt\n[train]\ntotal_tokens = 1e6\n", "<t>", "/cfg").train_corpus,
            fs::path("/abs/t.txt"));
  ::unsetenv(kCorpusRootEnv);
}

TEST(Config, LoadMissingFileIsInputError) {
  EXPECT_THROW(load_run_config("/nonexistent/run.ini"), InputError);
}

TEST(Config, ShippedConfigsParse) {
  for (const auto& e : fs::directory_iterator(fs::path(SHRINKLM_SOURCE_DIR) / "configs")) {
    if (e.path().extension() != ".ini") continue;
    SCOPED_TRACE(e.path().string());
    EXPECT_NO_THROW(load_run_config(e.path()));
  }
}
