import { defineConfig } from "vitest/config";

// The acceptance run trains the full MNIST model, so it gets its own
// config with a generous timeout and is excluded from `npm test`.
export default defineConfig({
  test: {
    include: ["test/accept.test.ts"],
    testTimeout: 3_600_000,
    hookTimeout: 3_600_000,
    pool: "forks",
    poolOptions: { forks: { singleFork: true } },
  },
});
