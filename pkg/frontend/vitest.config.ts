import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    environment: "node",
    testTimeout: 240_000,
    hookTimeout: 240_000,
    // the e2e spawns one renderer service; keep files sequential
    fileParallelism: false,
  },
});
