from fslab.cli import main

raise SystemExit(main())
